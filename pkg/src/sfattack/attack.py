"""Per-image adversarial optimization under an l-infinity budget.

The loop repeatedly: runs the detector on x+delta, rebuilds the dual-track
target set (unless frozen), evaluates the combined spatial/frequency loss,
steps delta with an adaptive infinity-norm-moment optimizer, then projects
back inside the budget and the valid pixel range. The returned delta is
the iterate with the fewest surviving post-processed detections (ties go
to the lower total loss, then the earlier iteration).
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .detector import DetectorModel, image_to_tensor, postprocess, tensor_to_image
from .losses import cls_loss, freq_loss, loc_loss, normalize_boxes, total_loss
from .targeting import SelectionConfig, build_attack_target_set

EPSILON_DEFAULT = 8.0 / 255.0


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = EPSILON_DEFAULT
    iterations: int = 50
    lr: float = 0.03
    weight_decay: float = 0.02
    lam: float = 100.0
    optimizer_kind: str = "adamax"  # or "signed-gd"
    decay_mode: str = "shrinkage"  # "shrinkage" multiplies delta by (1 - weight_decay)
    # after every step, decoupled from the gradient, so the perturbation
    # decays wherever the objective has stopped pushing; "additive" folds
    # wd*delta into the gradient instead (the classic coupled form)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    seed: int = 0
    freeze_targets: bool = False
    random_init: bool = False
    use_loc: bool = True
    use_cls: bool = True
    use_fa: bool = True
    pgd_step: float | None = None  # signed-gd step; default 2.5 * eps / iterations
    plateau_patience: int = 5
    score_threshold: float = 0.5
    nms_iou: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0,1), got {self.epsilon}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.weight_decay < 1.0:
            raise ValueError(f"weight_decay must lie in [0, 1), got {self.weight_decay}")
        if self.optimizer_kind not in ("adamax", "signed-gd"):
            raise ValueError(f"unknown optimizer_kind {self.optimizer_kind!r}")
        if self.decay_mode not in ("additive", "shrinkage"):
            raise ValueError(f"unknown decay_mode {self.decay_mode!r}")
        if self.plateau_patience < 1:
            raise ValueError(f"plateau_patience must be >= 1, got {self.plateau_patience}")


@dataclass
class Perturbation:
    delta: np.ndarray  # HxWxC, same layout as dataset images

    def linf(self) -> float:
        return float(np.abs(self.delta).max()) if self.delta.size else 0.0


@dataclass
class AttackResult:
    delta: Perturbation
    adversarial_image: np.ndarray
    trace: list[dict]
    final_detections: list
    elapsed: float
    best_iteration: int

    @property
    def budget_ok(self) -> bool:
        return all(row["in_budget"] for row in self.trace)


def _representable_budget(epsilon: float, dtype: torch.dtype) -> float:
    """Largest value of ``dtype`` that does not exceed ``epsilon``.

    Rounding 8/255 to float32 lands slightly above the true ratio, so a
    naive clamp would leak past the budget by about 1e-9; nudge down one
    ulp whenever the cast rounds up.
    """
    if dtype == torch.float64:
        return epsilon
    cast = np.float32(epsilon)
    if float(cast) > epsilon:
        cast = np.nextafter(cast, np.float32(0.0))
    return float(cast)


def project_linf(delta: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Elementwise clip to [-epsilon, epsilon]; idempotent.

    The bound is tightened to the nearest representable value below
    epsilon so the projected tensor never exceeds the budget even when
    read back at higher precision.
    """
    bound = _representable_budget(epsilon, delta.dtype)
    return delta.clamp(-bound, bound)


def clamp_valid(x: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """Pull delta toward zero wherever x+delta would leave [0,1].

    Rounding can nudge an interior element by an ulp, so callers follow
    this with ``project_linf`` to restore the exact budget; the pair of
    projections leaves both invariants exactly satisfied.
    """
    return torch.clamp(x + delta, 0.0, 1.0) - x


class _AdamaxStepper:
    """Adaptive per-element steps with an infinity-norm second moment.

    First moment is bias-corrected; the second moment is the running max
    of gradient magnitudes, so step sizes approach lr for any element
    whose gradient keeps a consistent scale.
    """

    def __init__(self, shape, dtype, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = torch.zeros(shape, dtype=dtype)
        self.u = torch.zeros(shape, dtype=dtype)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, delta: torch.Tensor, grad: torch.Tensor, lr: float) -> torch.Tensor:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.u = torch.maximum(self.beta2 * self.u, grad.abs())
        m_hat = self.m / (1 - self.beta1**self.t)
        return delta - lr * m_hat / (self.u + self.eps)


class _SignedGradientStepper:
    """Classic projected-gradient step: a fixed move against the gradient sign."""

    def step(self, delta: torch.Tensor, grad: torch.Tensor, lr: float) -> torch.Tensor:
        return delta - lr * torch.sign(grad)


def _scene_losses(model, x, delta, scene, config, targets):
    """Forward plus all enabled loss terms for the current delta."""
    x_adv = x + delta
    output = model(x_adv)
    if targets is None:
        targets = build_attack_target_set(output, scene.objects, config.selection)
    h, w = x.shape[-2], x.shape[-1]

    flat_reg = targets.flat_regression
    j_loc = 0.0
    if config.use_loc and flat_reg:
        selected = normalize_boxes(output.boxes[flat_reg], height=h, width=w)
        destinations = torch.tensor(targets.target_boxes, dtype=selected.dtype)
        j_loc = loc_loss(selected, destinations)

    flat_cls = targets.flat_classification
    j_cls = 0.0
    if config.use_cls and flat_cls:
        j_cls = cls_loss(output.probs[flat_cls], targets.gt_labels)

    j_lfc, j_hfc = 0.0, 0.0
    if config.use_fa:
        j_lfc, j_hfc, _ = freq_loss(x, x_adv)

    total, breakdown = total_loss(j_loc, j_cls, j_lfc, j_hfc, config.lam)
    return output, targets, total, breakdown


def _assert_invariants(x: torch.Tensor, delta: torch.Tensor, epsilon: float) -> dict:
    linf = float(delta.abs().max())
    x_adv = x + delta
    lo, hi = float(x_adv.min()), float(x_adv.max())
    in_budget = linf <= epsilon and 0.0 <= lo and hi <= 1.0
    if not in_budget:
        raise AssertionError(
            f"budget invariant violated: linf={linf!r} (eps={epsilon!r}), range=[{lo!r}, {hi!r}]"
        )
    return {"delta_linf": linf, "adv_min": lo, "adv_max": hi, "in_budget": True}


def run_attack(model: DetectorModel, scene, config: AttackConfig) -> AttackResult:
    """Optimize a budget-constrained perturbation against one scene."""
    if not scene.objects:
        raise ValueError(f"scene '{scene.id}' has no ground-truth objects to attack")
    started = time.monotonic()
    model.eval()

    x = image_to_tensor(scene.image)
    generator = torch.Generator().manual_seed(config.seed)
    if config.random_init:
        delta = (torch.rand(x.shape, generator=generator) * 2 - 1) * config.epsilon
    else:
        delta = torch.zeros_like(x)
    delta = project_linf(clamp_valid(x, project_linf(delta, config.epsilon)), config.epsilon)

    if config.optimizer_kind == "adamax":
        stepper = _AdamaxStepper(x.shape, x.dtype)
    else:
        stepper = _SignedGradientStepper()
    lr = config.lr if config.optimizer_kind == "adamax" else (
        config.pgd_step if config.pgd_step is not None else 2.5 * config.epsilon / config.iterations
    )

    frozen = None
    trace: list[dict] = []
    best = None  # (survivors, j_total, iteration, delta copy)
    best_j_total = float("inf")
    since_improvement = 0

    for iteration in range(config.iterations):
        work = delta.clone().requires_grad_()
        output, targets, total, _ = _scene_losses(model, x, work, scene, config, frozen)
        if config.freeze_targets and frozen is None:
            frozen = targets
        if iteration == 0 and targets.nothing_to_attack:
            warnings.warn(
                f"scene '{scene.id}': no candidates selected on either track at iteration 0"
            )

        if isinstance(total, torch.Tensor) and total.requires_grad:
            (grad,) = torch.autograd.grad(total, work)
        else:
            grad = torch.zeros_like(delta)

        with torch.no_grad():
            if config.weight_decay > 0 and config.decay_mode == "additive":
                grad = grad + config.weight_decay * delta
            new_delta = stepper.step(delta, grad, lr)
            if config.weight_decay > 0 and config.decay_mode == "shrinkage":
                new_delta = new_delta * (1.0 - config.weight_decay)
            new_delta = project_linf(new_delta, config.epsilon)
            new_delta = clamp_valid(x, new_delta)
            new_delta = project_linf(new_delta, config.epsilon)
        delta = new_delta.detach()

        # score the freshly stepped iterate (no gradients needed)
        with torch.no_grad():
            s_output, s_targets, s_total, s_breakdown = _scene_losses(
                model, x, delta, scene, config, frozen
            )
            survivors = postprocess(
                s_output, score_threshold=config.score_threshold, nms_iou=config.nms_iou
            )
        row = _assert_invariants(x, delta, config.epsilon)
        row.update(
            iteration=iteration,
            lr=lr,
            losses=s_breakdown.to_dict(),
            n_regression_targets=len(s_targets.flat_regression),
            n_classification_targets=len(s_targets.flat_classification),
            survivors=len(survivors),
        )
        trace.append(row)

        j_total = s_breakdown.j_total
        key = (len(survivors), j_total, iteration)
        if best is None or key < (best[0], best[1], best[2]):
            best = (len(survivors), j_total, iteration, delta.clone())
        if j_total < best_j_total - 1e-12:
            best_j_total = j_total
            since_improvement = 0
        else:
            since_improvement += 1
            if since_improvement >= config.plateau_patience:
                lr *= 0.5
                since_improvement = 0

    survivors_count, _, best_iteration, best_delta = best
    adv = torch.clamp(x + best_delta, 0.0, 1.0)
    with torch.no_grad():
        final_detections = postprocess(
            model(adv), score_threshold=config.score_threshold, nms_iou=config.nms_iou
        )
    return AttackResult(
        delta=Perturbation(delta=tensor_to_image(best_delta)),
        adversarial_image=tensor_to_image(adv),
        trace=trace,
        final_detections=final_detections,
        elapsed=time.monotonic() - started,
        best_iteration=best_iteration,
    )


def run_baseline_pgd(model: DetectorModel, scene, config: AttackConfig) -> AttackResult:
    """Ablation baseline: signed-gradient steps on the spatial loss only."""
    baseline = replace(config, optimizer_kind="signed-gd", use_fa=False)
    return run_attack(model, scene, baseline)


ABLATION_VARIANTS: dict[str, dict] = {
    "full": {},
    "no-jfa": {"use_fa": False},
    "no-jcls": {"use_cls": False},
    "no-jloc": {"use_loc": False},
    "jfa-only": {"use_loc": False, "use_cls": False},
    "baseline-pgd": {"optimizer_kind": "signed-gd", "use_fa": False},
}


def variant_config(base: AttackConfig, name: str) -> AttackConfig:
    """AttackConfig for one named ablation variant, sharing everything else."""
    if name not in ABLATION_VARIANTS:
        raise ValueError(f"unknown variant {name!r}; known: {sorted(ABLATION_VARIANTS)}")
    return replace(base, **ABLATION_VARIANTS[name])


def scene_seed(base_seed: int, scene_id: str) -> int:
    """Default per-scene seed: a CRC of "<seed>:<scene_id>", keeping
    per-scene randomness decoupled from scene ordering."""
    import zlib

    return zlib.crc32(f"{base_seed}:{scene_id}".encode())


def attack_scenes(
    model: DetectorModel,
    scenes: Sequence,
    config: AttackConfig,
    seed_for_scene=None,
) -> dict[str, AttackResult]:
    """Run the attack over many scenes with per-scene seeds.

    ``seed_for_scene(scene_id)`` may override the default derivation
    (see ``scene_seed``).
    """
    results = {}
    for scene in scenes:
        if seed_for_scene is not None:
            seed = seed_for_scene(scene.id)
        else:
            seed = scene_seed(config.seed, scene.id)
        results[scene.id] = run_attack(model, scene, replace(config, seed=seed))
    return results
