"""Attack losses: spatial (box + class) and frequency terms.

Everything here is a pure, differentiable function of torch tensors. The
spatial side pulls selected candidate boxes toward the degenerate origin
box and pushes their class mass from the ground-truth label to background;
the frequency side penalizes low-frequency drift while rewarding
high-frequency drift between the clean and adversarial image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .wavelet import HAAR, ShapeError, WaveletFilters, pad_even, reconstruct_hfc, reconstruct_lfc

PROB_FLOOR = 1e-12


class ConsistencyError(RuntimeError):
    """A LossBreakdown's parts do not add up."""


@dataclass
class LossBreakdown:
    """Scalar snapshot of every loss term for one attack iteration."""

    j_loc: float
    j_cls: float
    j_sa: float
    j_lfc: float
    j_hfc: float
    j_fa: float
    j_total: float
    lam: float

    def validate(self, tol: float = 1e-6) -> None:
        if abs(self.j_sa - (self.j_loc + self.lam * self.j_cls)) > tol:
            raise ConsistencyError(
                f"j_sa {self.j_sa} != j_loc + lam*j_cls = {self.j_loc + self.lam * self.j_cls}"
            )
        if abs(self.j_fa - (self.j_lfc - self.j_hfc)) > tol:
            raise ConsistencyError(f"j_fa {self.j_fa} != j_lfc - j_hfc = {self.j_lfc - self.j_hfc}")
        if abs(self.j_total - (self.j_sa + self.j_fa)) > tol:
            raise ConsistencyError(f"j_total {self.j_total} != j_sa + j_fa = {self.j_sa + self.j_fa}")

    def to_dict(self) -> dict:
        return {
            "j_loc": self.j_loc,
            "j_cls": self.j_cls,
            "j_sa": self.j_sa,
            "j_lfc": self.j_lfc,
            "j_hfc": self.j_hfc,
            "j_fa": self.j_fa,
            "j_total": self.j_total,
            "lam": self.lam,
        }


def smooth_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean smooth-L1 (Huber with beta=1) between equally shaped tensors."""
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"smooth_l1 operands differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    return F.smooth_l1_loss(a, b.to(a.dtype), beta=1.0, reduction="mean")


def normalize_boxes(boxes: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Scale corner-format pixel boxes into [0,1] coordinates."""
    scale = torch.tensor([width, height, width, height], dtype=boxes.dtype, device=boxes.device)
    return boxes / scale


def loc_loss(adv_boxes_selected: torch.Tensor, target_boxes: torch.Tensor) -> torch.Tensor:
    """Mean smooth-L1 between selected boxes and their destination boxes.

    Boxes must already be in normalized [0,1] corner coordinates; the
    destination for this attack is the origin box for every selection.
    """
    adv = torch.as_tensor(adv_boxes_selected)
    if adv.numel() == 0:
        raise ValueError("loc_loss called with an empty selection; caller must guard")
    tgt = torch.as_tensor(target_boxes, dtype=adv.dtype, device=adv.device)
    return smooth_l1(adv, tgt)


def cls_loss(probs_selected: torch.Tensor, gt_labels: Sequence[int]) -> torch.Tensor:
    """Mean log ground-truth-class probability minus mean log background.

    Rows are (K+1)-way probability vectors with background last; both
    factors are clamped to [1e-12, 1] so the logs stay finite. Minimizing
    this drives ground-truth confidence down and background confidence up.
    """
    probs = torch.as_tensor(probs_selected)
    if probs.numel() == 0 or len(gt_labels) == 0:
        raise ValueError("cls_loss called with an empty selection; caller must guard")
    if probs.ndim != 2 or probs.shape[0] != len(gt_labels):
        raise ShapeError(
            f"expected ({len(gt_labels)}, K+1) probability rows, got {tuple(probs.shape)}"
        )
    labels = torch.as_tensor(list(gt_labels), dtype=torch.long, device=probs.device)
    clamped = probs.clamp(PROB_FLOOR, 1.0)
    gt_term = clamped[torch.arange(len(gt_labels), device=probs.device), labels].log().mean()
    bg_term = clamped[:, -1].log().mean()
    return gt_term - bg_term


def spatial_loss(j_loc: torch.Tensor, j_cls: torch.Tensor, lam: float) -> torch.Tensor:
    return torch.as_tensor(j_loc) + lam * torch.as_tensor(j_cls)


def freq_loss(
    x: torch.Tensor, x_adv: torch.Tensor, filters: WaveletFilters = HAAR
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(j_lfc, j_hfc, j_fa): low- minus high-frequency reconstruction drift.

    ``x`` is treated as a constant; gradients flow only through ``x_adv``.
    Odd-sized images are edge-padded to even sizes before the transform.
    """
    if x.shape != x_adv.shape:
        raise ShapeError(f"freq_loss operands differ in shape: {tuple(x.shape)} vs {tuple(x_adv.shape)}")
    x = x.detach()
    x_pad, _ = pad_even(x)
    adv_pad, _ = pad_even(x_adv)
    j_lfc = smooth_l1(reconstruct_lfc(adv_pad, filters), reconstruct_lfc(x_pad, filters))
    j_hfc = smooth_l1(reconstruct_hfc(adv_pad, filters), reconstruct_hfc(x_pad, filters))
    return j_lfc, j_hfc, j_lfc - j_hfc


def total_loss(
    j_loc: torch.Tensor | float,
    j_cls: torch.Tensor | float,
    j_lfc: torch.Tensor | float,
    j_hfc: torch.Tensor | float,
    lam: float,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Assemble the scalar objective and its validated breakdown.

    Returns the differentiable total (a tensor when any input carries
    gradient) alongside a plain-float LossBreakdown whose additive
    invariants are recomputed in python floats and checked exactly.
    """
    j_loc_t = torch.as_tensor(j_loc)
    j_cls_t = torch.as_tensor(j_cls)
    j_lfc_t = torch.as_tensor(j_lfc)
    j_hfc_t = torch.as_tensor(j_hfc)
    total = (j_loc_t + lam * j_cls_t) + (j_lfc_t - j_hfc_t)

    f_loc, f_cls = float(j_loc_t.detach()), float(j_cls_t.detach())
    f_lfc, f_hfc = float(j_lfc_t.detach()), float(j_hfc_t.detach())
    f_sa = f_loc + lam * f_cls
    f_fa = f_lfc - f_hfc
    breakdown = LossBreakdown(
        j_loc=f_loc,
        j_cls=f_cls,
        j_sa=f_sa,
        j_lfc=f_lfc,
        j_hfc=f_hfc,
        j_fa=f_fa,
        j_total=f_sa + f_fa,
        lam=lam,
    )
    breakdown.validate()
    return total, breakdown
