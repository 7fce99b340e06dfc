"""A small single-stage anchor-grid object detector, trained from scratch.

The model maps an image to N candidate detections (corner boxes plus
(K+1)-way probabilities, background last) through plain convolutions, so
every output is differentiable with respect to the input pixels. N is
fixed by image size, stride, and anchors per cell; no NMS or thresholding
happens inside ``forward`` — attacks consume the raw candidate grid.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .targeting import iou_matrix
from .wavelet import ShapeError

OFFSET_CLAMP = 4.0  # bound on log-size offsets before exp
BOX_SIGMAS = (0.1, 0.1, 0.2, 0.2)  # target normalization for the box head


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 128
    stride: int = 16
    k_classes: int = 3
    in_channels: int = 3
    base_channels: int = 32
    anchor_scales: tuple[float, ...] = (1.75,)  # anchor side = scale * stride

    def __post_init__(self):
        if self.stride < 2 or self.stride & (self.stride - 1):
            raise ValueError(f"stride must be a power of two >= 2, got {self.stride}")
        if self.image_size % self.stride:
            raise ValueError(f"stride {self.stride} must divide image size {self.image_size}")
        if self.k_classes < 1:
            raise ValueError(f"k_classes must be >= 1, got {self.k_classes}")
        if not self.anchor_scales:
            raise ValueError("at least one anchor scale is required")

    @property
    def grid(self) -> int:
        return self.image_size // self.stride

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_scales)

    @property
    def num_candidates(self) -> int:
        return self.grid * self.grid * self.anchors_per_cell


@dataclass
class DetectorOutput:
    """Raw candidate grid: ``boxes`` (N,4) pixel corners, ``probs`` (N,K+1)."""

    boxes: torch.Tensor
    probs: torch.Tensor


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    label: int
    score: float


class DetectorModel(nn.Module):
    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = []
        ch = config.in_channels
        out_ch = config.base_channels
        n_down = int(round(math.log2(config.stride)))
        for i in range(n_down):
            if i == n_down - 1:
                # Stride-1 mixing conv placed before the final downsample: adds
                # local context without growing the receptive field past the
                # largest objects.
                layers += [nn.Conv2d(ch, ch, 3, padding=1), nn.SiLU()]
            layers += [nn.Conv2d(ch, out_ch, 3, stride=2, padding=1), nn.SiLU()]
            ch = out_ch
            out_ch = min(out_ch * 2, 4 * config.base_channels)
        self.backbone = nn.Sequential(*layers)
        a = config.anchors_per_cell
        self.box_head = nn.Conv2d(ch, 4 * a, 1)
        self.cls_head = nn.Conv2d(ch, (config.k_classes + 1) * a, 1)
        self.register_buffer("anchors_center", _build_anchors(config), persistent=False)

    def raw_forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Batched heads: offsets (B,N,4) and logits (B,N,K+1)."""
        cfg = self.config
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if tuple(images.shape[1:]) != expected:
            raise ShapeError(f"expected batch of {expected} images, got {tuple(images.shape)}")
        feat = self.backbone(images)
        b, g, a = images.shape[0], cfg.grid, cfg.anchors_per_cell
        offsets = self.box_head(feat).view(b, a, 4, g, g).permute(0, 3, 4, 1, 2)
        logits = self.cls_head(feat).view(b, a, cfg.k_classes + 1, g, g).permute(0, 3, 4, 1, 2)
        return offsets.reshape(b, -1, 4), logits.reshape(b, -1, cfg.k_classes + 1)

    def decode_boxes(self, offsets: torch.Tensor) -> torch.Tensor:
        """(…,N,4) sigma-scaled offsets relative to anchors -> pixel corners."""
        anchors = self.anchors_center.to(offsets.dtype)
        sx, sy, sw, sh = BOX_SIGMAS
        cx = anchors[:, 0] + sx * offsets[..., 0] * anchors[:, 2]
        cy = anchors[:, 1] + sy * offsets[..., 1] * anchors[:, 3]
        w = anchors[:, 2] * torch.exp((sw * offsets[..., 2]).clamp(-OFFSET_CLAMP, OFFSET_CLAMP))
        h = anchors[:, 3] * torch.exp((sh * offsets[..., 3]).clamp(-OFFSET_CLAMP, OFFSET_CLAMP))
        return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)

    def forward(self, image: torch.Tensor) -> DetectorOutput:
        """Single (C,H,W) image -> DetectorOutput; gradients flow to pixels."""
        cfg = self.config
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if tuple(image.shape) != expected:
            raise ShapeError(f"expected a {expected} image, got {tuple(image.shape)}")
        offsets, logits = self.raw_forward(image.unsqueeze(0))
        boxes = self.decode_boxes(offsets[0])
        probs = torch.softmax(logits[0], dim=-1)
        return DetectorOutput(boxes=boxes, probs=probs)

    def anchor_boxes(self) -> torch.Tensor:
        """Anchors as (N,4) pixel corners, in candidate order."""
        a = self.anchors_center
        return torch.stack(
            [
                a[:, 0] - a[:, 2] / 2,
                a[:, 1] - a[:, 3] / 2,
                a[:, 0] + a[:, 2] / 2,
                a[:, 1] + a[:, 3] / 2,
            ],
            dim=-1,
        )


def _build_anchors(config: DetectorConfig) -> torch.Tensor:
    """(N,4) anchors as (cx, cy, w, h), cell-major then per-cell scale."""
    rows = []
    for gy in range(config.grid):
        for gx in range(config.grid):
            for scale in config.anchor_scales:
                side = scale * config.stride
                rows.append(
                    ((gx + 0.5) * config.stride, (gy + 0.5) * config.stride, side, side)
                )
    return torch.tensor(rows, dtype=torch.float32)


def forward(model: DetectorModel, image: torch.Tensor) -> DetectorOutput:
    return model(image)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H,W,C) unit-interval array -> (C,H,W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()


def tensor_to_image(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach().cpu().numpy().transpose(1, 2, 0).astype(np.float32)


def assign_anchors(
    anchor_corners: np.ndarray,
    gts: Sequence,
    k_classes: int,
    pos_iou: float = 0.5,
    bg_iou: float = 0.4,
) -> tuple[np.ndarray, np.ndarray]:
    """Match anchors to ground truth for training.

    Returns per-anchor class targets (``k_classes`` plays background, -1
    means ignored) and the matched ground-truth index (-1 where unmatched).
    An anchor is positive when its best IoU >= pos_iou, background below
    bg_iou, ignored in between; additionally every object claims its
    single highest-IoU anchor, so no object goes unrepresented even when
    its geometry clears neither threshold.
    """
    n = anchor_corners.shape[0]
    cls_targets = np.full(n, k_classes, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if not gts:
        return cls_targets, matched
    gt_boxes = np.array([g.box for g in gts], dtype=np.float64)
    ious = iou_matrix(anchor_corners, gt_boxes)  # (N, M)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels = np.array([g.label for g in gts], dtype=np.int64)

    cls_targets[best_iou >= bg_iou] = -1
    pos_mask = best_iou >= pos_iou
    cls_targets[pos_mask] = labels[best_gt[pos_mask]]
    matched[pos_mask] = best_gt[pos_mask]

    for m in range(len(gts)):
        a_star = int(ious[:, m].argmax())
        cls_targets[a_star] = labels[m]
        matched[a_star] = m
    return cls_targets, matched


def encode_boxes(anchors_center: torch.Tensor, gt_boxes: torch.Tensor) -> torch.Tensor:
    """Inverse of decode_boxes for matched (anchor, gt) pairs."""
    sx, sy, sw, sh = BOX_SIGMAS
    gw = (gt_boxes[:, 2] - gt_boxes[:, 0]).clamp_min(1e-6)
    gh = (gt_boxes[:, 3] - gt_boxes[:, 1]).clamp_min(1e-6)
    gcx = (gt_boxes[:, 0] + gt_boxes[:, 2]) / 2
    gcy = (gt_boxes[:, 1] + gt_boxes[:, 3]) / 2
    tx = (gcx - anchors_center[:, 0]) / anchors_center[:, 2] / sx
    ty = (gcy - anchors_center[:, 1]) / anchors_center[:, 3] / sy
    tw = torch.log(gw / anchors_center[:, 2]) / sw
    th = torch.log(gh / anchors_center[:, 3]) / sh
    return torch.stack([tx, ty, tw, th], dim=-1)


def train(
    model: DetectorModel,
    train_scenes: Sequence,
    epochs: int,
    lr: float = 2e-3,
    val_scenes: Sequence | None = None,
    seed: int = 0,
    batch_size: int = 8,
    noise: float = 0.0,
    label_smoothing: float = 0.1,
) -> dict:
    """Train with smooth-L1 box regression plus (K+1)-way cross entropy.

    ``label_smoothing`` keeps the classifier calibrated instead of letting
    logit gaps grow without bound on easy scenes; fully saturated softmax
    outputs would otherwise sit in a zero-gradient plateau. ``noise`` adds
    uniform pixel noise of that amplitude during training
    (a light robustness augmentation; boxes are unaffected). Returns a
    history dict with per-epoch mean train loss and, when ``val_scenes``
    is given, validation mAP50.
    """
    history: dict = {"train_loss": [], "val_map50": []}
    if epochs == 0:
        return history
    if not train_scenes:
        raise ValueError("train called with an empty training set")

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    cfg = model.config
    images = torch.stack([image_to_tensor(s.image) for s in train_scenes])
    anchor_corners = model.anchor_boxes().numpy()

    cls_targets, reg_targets, reg_masks = [], [], []
    for scene in train_scenes:
        cls_t, matched = assign_anchors(anchor_corners, scene.objects, cfg.k_classes)
        pos = matched >= 0
        gt_boxes = torch.tensor(
            [scene.objects[m].box for m in matched[pos]], dtype=torch.float32
        ).reshape(-1, 4)
        full_reg = torch.zeros(cfg.num_candidates, 4)
        if pos.any():
            full_reg[pos] = encode_boxes(model.anchors_center[pos], gt_boxes)
        cls_targets.append(torch.from_numpy(cls_t))
        reg_targets.append(full_reg)
        reg_masks.append(torch.from_numpy(pos))
    cls_targets = torch.stack(cls_targets)
    reg_targets = torch.stack(reg_targets)
    reg_masks = torch.stack(reg_masks)
    if not reg_masks.any():
        warnings.warn("no positive anchors anywhere in the training set")

    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=epochs, eta_min=lr * 0.1
    )
    for _epoch in range(epochs):
        model.train()
        order = rng.permutation(len(train_scenes))
        epoch_losses = []
        for start in range(0, len(order), batch_size):
            idx = torch.from_numpy(order[start : start + batch_size].copy())
            batch = images[idx]
            if noise > 0:
                batch = (batch + (torch.rand_like(batch) * 2 - 1) * noise).clamp(0, 1)
            offsets, logits = model.raw_forward(batch)

            keep = cls_targets[idx] >= 0
            loss_cls = F.cross_entropy(
                logits[keep], cls_targets[idx][keep], label_smoothing=label_smoothing
            )
            pos = reg_masks[idx]
            if pos.any():
                loss_box = F.smooth_l1_loss(offsets[pos], reg_targets[idx][pos])
            else:
                warnings.warn("batch without positive anchors; skipping box loss")
                loss_box = torch.zeros((), dtype=offsets.dtype)
            loss = loss_cls + loss_box
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
        history["train_loss"].append(float(np.mean(epoch_losses)))
        scheduler.step()

        if val_scenes:
            from .evaluation import compute_map  # deferred: evaluation imports this module

            model.eval()
            preds, gts = [], []
            with torch.no_grad():
                for scene in val_scenes:
                    output = model(image_to_tensor(scene.image))
                    preds.append(postprocess(output))
                    gts.append(scene.objects)
            history["val_map50"].append(compute_map(preds, gts, iou_threshold=0.5))
    model.eval()
    return history


def postprocess(
    output: DetectorOutput, score_threshold: float = 0.5, nms_iou: float = 0.5
) -> list[Detection]:
    """Final detections: drop background/low-score rows, per-class greedy NMS.

    A row's label is the argmax over all K+1 entries — rows whose argmax is
    the background column are discarded outright — and its score is the
    winning foreground probability. Survivors come back sorted by score
    descending, ties broken by candidate index.
    """
    if not 0.0 <= score_threshold <= 1.0 or not 0.0 <= nms_iou <= 1.0:
        raise ValueError(f"thresholds must lie in [0,1], got {score_threshold}, {nms_iou}")
    boxes = output.boxes.detach().cpu().numpy()
    probs = output.probs.detach().cpu().numpy()
    k_classes = probs.shape[1] - 1
    argmax_all = probs.argmax(axis=1)
    candidates = [
        (int(i), int(argmax_all[i]), float(probs[i, argmax_all[i]]))
        for i in range(len(boxes))
        if argmax_all[i] != k_classes and probs[i, argmax_all[i]] >= score_threshold
    ]
    survivors: list[Detection] = []
    for label in sorted({c[1] for c in candidates}):
        pool = sorted((c for c in candidates if c[1] == label), key=lambda c: (-c[2], c[0]))
        kept: list[int] = []
        for i, _, score in pool:
            box = boxes[i]
            if all(_iou_single(box, boxes[j]) <= nms_iou for j in kept):
                kept.append(i)
                survivors.append(Detection(box=tuple(float(v) for v in box), label=label, score=score))
    survivors.sort(key=lambda d: (-d.score, d.box))
    return survivors


def _iou_single(a: np.ndarray, b: np.ndarray) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def save_checkpoint(model: DetectorModel, path: str | Path) -> None:
    """Self-describing checkpoint: architecture hyperparameters + weights."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"config": asdict(model.config), "state_dict": model.state_dict()}, path)


def load_checkpoint(path: str | Path) -> DetectorModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    config = payload["config"]
    config["anchor_scales"] = tuple(config["anchor_scales"])
    model = DetectorModel(DetectorConfig(**config))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
