"""Dual-track selection of which candidate boxes to attack.

For every ground-truth object two independent shortlists are built from the
detector's raw candidates: the regression track keeps the top-k candidates
by IoU with the object, and the classification track keeps the top-k by IoU
among candidates whose predicted foreground label matches the object's
label. The union of both tracks is what the attack losses act on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORIGIN_BOX = (0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SelectionConfig:
    k: int = 1
    iou_floor: float = 0.05

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.iou_floor < 1.0:
            raise ValueError(f"iou_floor must lie in [0, 1), got {self.iou_floor}")


@dataclass
class AttackTargetSet:
    """Selected candidate indices for one image, per ground-truth object.

    ``regression_indices[m]`` / ``classification_indices[m]`` list the
    candidates chosen for object m, best IoU first. ``target_boxes`` holds
    one attacker-chosen destination box per flattened regression index and
    ``gt_labels`` one ground-truth label per flattened classification index.
    """

    regression_indices: list[list[int]] = field(default_factory=list)
    classification_indices: list[list[int]] = field(default_factory=list)
    target_boxes: list[tuple[float, float, float, float]] = field(default_factory=list)
    gt_labels: list[int] = field(default_factory=list)

    @property
    def flat_regression(self) -> list[int]:
        return [i for per_obj in self.regression_indices for i in per_obj]

    @property
    def flat_classification(self) -> list[int]:
        return [i for per_obj in self.classification_indices for i in per_obj]

    @property
    def nothing_to_attack(self) -> bool:
        return not self.flat_regression and not self.flat_classification


def iou(box_a, box_b) -> float:
    """Intersection over union of two corner-format boxes.

    Degenerate (zero or negative area) boxes contribute no overlap and
    yield 0 against anything.
    """
    ax1, ay1, ax2, ay2 = box_a
    bx1, by1, bx2, by2 = box_b
    inter_w = min(ax2, bx2) - max(ax1, bx1)
    inter_h = min(ay2, by2) - max(ay1, by1)
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    inter = inter_w * inter_h
    area_a = max(ax2 - ax1, 0.0) * max(ay2 - ay1, 0.0)
    area_b = max(bx2 - bx1, 0.0) * max(by2 - by1, 0.0)
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two corner-format box arrays, shape (A, B)."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def _top_k_by_iou(ious: np.ndarray, eligible: np.ndarray, cfg: SelectionConfig) -> list[int]:
    """Indices of the k best eligible candidates, IoU descending, ties by
    lower index."""
    idx = np.flatnonzero(eligible & (ious >= cfg.iou_floor))
    if idx.size == 0:
        return []
    order = idx[np.argsort(-ious[idx], kind="stable")]
    return [int(i) for i in order[: cfg.k]]


def _as_numpy(array_like) -> np.ndarray:
    if hasattr(array_like, "detach"):
        array_like = array_like.detach().cpu().numpy()
    return np.asarray(array_like, dtype=np.float64)


def select_regression_targets(output, gts, cfg: SelectionConfig) -> list[list[int]]:
    """Per object: the k candidates with highest IoU above the floor."""
    boxes = _as_numpy(output.boxes)
    gt_boxes = np.array([g.box for g in gts], dtype=np.float64)
    ious = iou_matrix(boxes, gt_boxes)
    all_eligible = np.ones(boxes.shape[0], dtype=bool)
    return [_top_k_by_iou(ious[:, m], all_eligible, cfg) for m in range(len(gts))]


def select_classification_targets(output, gts, cfg: SelectionConfig) -> list[list[int]]:
    """As the regression track, but only candidates whose predicted
    foreground label matches the object's label are eligible."""
    boxes = _as_numpy(output.boxes)
    probs = _as_numpy(output.probs)
    k_classes = probs.shape[1] - 1
    predicted = probs[:, :k_classes].argmax(axis=1)
    gt_boxes = np.array([g.box for g in gts], dtype=np.float64)
    ious = iou_matrix(boxes, gt_boxes)
    return [
        _top_k_by_iou(ious[:, m], predicted == g.label, cfg)
        for m, g in enumerate(gts)
    ]


def build_attack_target_set(output, gts, cfg: SelectionConfig) -> AttackTargetSet:
    """Combine both tracks into one target set for the current iteration.

    Every regression pick is assigned the degenerate origin box as its
    destination; every classification pick records its object's label.
    An all-empty result signals nothing-to-attack and the caller may skip
    the spatial losses for this iteration.
    """
    reg = select_regression_targets(output, gts, cfg)
    cls = select_classification_targets(output, gts, cfg)
    targets = AttackTargetSet(regression_indices=reg, classification_indices=cls)
    targets.target_boxes = [ORIGIN_BOX for _ in targets.flat_regression]
    targets.gt_labels = [
        gts[m].label for m, per_obj in enumerate(cls) for _ in per_obj
    ]
    return targets
