"""Evaluation: mAP at IoU thresholds, stealth metrics, corruption defenses.

mAP follows the modern all-points interpolation convention: per class,
predictions are sorted by score and greedily matched to the not-yet-used
ground truth with the highest IoU above the threshold; the mean runs over
classes that actually have ground truth. Stealth is quantified by NMSE,
anisotropic total variation, and a windowed-SSIM proxy (the proxy is a
plain single-scale SSIM; every report header says so).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.signal import correlate2d

from .dataset import load_image_png
from .detector import DetectorModel, image_to_tensor, postprocess
from .targeting import iou
from .wavelet import ShapeError

BRIGHTNESS_OFFSETS = (0.05, 0.10, 0.15, 0.20, 0.25)
SPATTER_COLOR = np.array([0.35, 0.27, 0.20])  # one mud tone for every blob


class EvaluationError(RuntimeError):
    """Evaluation could not produce a defined result."""


@dataclass
class EvaluationReport:
    clean_map50: float
    clean_map75: float
    adv_map50: float | None
    adv_map75: float | None
    nmse_mean: float | None
    tv_mean: float | None
    ssim_proxy_mean: float | None
    per_scene: list[dict] = field(default_factory=list)
    corruptions: dict = field(default_factory=dict)
    missing_scenes: list[str] = field(default_factory=list)
    config_fingerprint: str = ""

    def validate(self) -> None:
        for name in ("clean_map50", "clean_map75", "adv_map50", "adv_map75"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise EvaluationError(f"{name} outside [0,1]: {value}")


def compute_map(predictions: Sequence, ground_truths: Sequence, iou_threshold: float) -> float:
    """Mean average precision over classes with ground truth.

    ``predictions[i]`` and ``ground_truths[i]`` describe scene i; entries
    need ``box``/``label`` attributes, predictions also ``score``.
    """
    if len(predictions) != len(ground_truths):
        raise ValueError(
            f"prediction/ground-truth scene counts differ: {len(predictions)} vs {len(ground_truths)}"
        )
    classes = sorted({g.label for gts in ground_truths for g in gts})
    if not classes:
        raise EvaluationError("mAP is undefined: no ground-truth objects at all")

    aps = []
    for cls in classes:
        n_gt = sum(1 for gts in ground_truths for g in gts if g.label == cls)
        if n_gt == 0:
            continue
        ranked = sorted(
            (
                (p.score, scene_idx, slot, p.box)
                for scene_idx, preds in enumerate(predictions)
                for slot, p in enumerate(preds)
                if p.label == cls
            ),
            key=lambda t: (-t[0], t[1], t[2]),
        )
        used: set[tuple[int, int]] = set()
        tp = np.zeros(len(ranked))
        for rank, (_, scene_idx, _, box) in enumerate(ranked):
            best_iou, best_j = 0.0, -1
            for j, g in enumerate(ground_truths[scene_idx]):
                if g.label != cls or (scene_idx, j) in used:
                    continue
                value = iou(box, g.box)
                if value >= iou_threshold and value > best_iou:
                    best_iou, best_j = value, j
            if best_j >= 0:
                used.add((scene_idx, best_j))
                tp[rank] = 1.0
        aps.append(_all_points_ap(tp, n_gt))
    return float(np.mean(aps))


def _all_points_ap(tp: np.ndarray, n_gt: int) -> float:
    """Area under the monotone precision envelope across recall."""
    if len(tp) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def nmse(x: np.ndarray, x_adv: np.ndarray) -> float:
    """Squared error energy over the reference signal energy."""
    if x.shape != x_adv.shape:
        raise ShapeError(f"nmse operands differ in shape: {x.shape} vs {x_adv.shape}")
    num = float(np.sum((x.astype(np.float64) - x_adv.astype(np.float64)) ** 2))
    denom = float(np.sum(x.astype(np.float64) ** 2))
    if denom == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / denom


def tv(x: np.ndarray) -> float:
    """Anisotropic total variation on the 0-255 intensity scale.

    Mean absolute neighbor difference per direction (a direction with no
    valid pairs contributes 0), summed over channels, times 255.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    total = 0.0
    for c in range(arr.shape[2]):
        plane = arr[:, :, c]
        dh = np.abs(np.diff(plane, axis=1))
        dv = np.abs(np.diff(plane, axis=0))
        total += (dh.mean() if dh.size else 0.0) + (dv.mean() if dv.size else 0.0)
    return 255.0 * total


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2 * sigma**2))
    window = np.outer(g, g)
    return window / window.sum()


def ssim_proxy(x: np.ndarray, x_adv: np.ndarray) -> float:
    """mean(1 - SSIM) with an 11x11 Gaussian window, sigma 1.5, L = 1.

    Channel-mean grayscale, valid-mode windows only (no padded borders).
    """
    if x.shape != x_adv.shape:
        raise ShapeError(f"ssim operands differ in shape: {x.shape} vs {x_adv.shape}")
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_adv, dtype=np.float64)
    if a.ndim == 3:
        a = a.mean(axis=2)
        b = b.mean(axis=2)
    window = _gaussian_window()
    if a.shape[0] < 11 or a.shape[1] < 11:
        raise ShapeError(f"images must be at least 11x11 for the SSIM window, got {a.shape}")
    c1, c2 = 0.01**2, 0.03**2

    mu_a = correlate2d(a, window, mode="valid")
    mu_b = correlate2d(b, window, mode="valid")
    var_a = correlate2d(a * a, window, mode="valid") - mu_a**2
    var_b = correlate2d(b * b, window, mode="valid") - mu_b**2
    cov = correlate2d(a * b, window, mode="valid") - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(np.mean(1.0 - ssim_map))


def corrupt_brightness(image: np.ndarray, severity: int) -> np.ndarray:
    """Uniform additive brightening, 0.05 per severity step, clamped."""
    if severity not in (1, 2, 3, 4, 5):
        raise ValueError(f"severity must be an integer 1..5, got {severity}")
    return np.clip(image + BRIGHTNESS_OFFSETS[severity - 1], 0.0, 1.0).astype(np.float32)


def corrupt_spatter(image: np.ndarray, severity: int, seed: int = 0) -> np.ndarray:
    """Occluding mud blobs; count and size grow with severity.

    Stages are cumulative and replayed from one seeded stream, so the
    severity-s image extends the severity-(s-1) image — corruption error
    versus the original is non-decreasing in severity by construction.
    """
    if severity not in (1, 2, 3, 4, 5):
        raise ValueError(f"severity must be an integer 1..5, got {severity}")
    h, w = image.shape[:2]
    out = image.astype(np.float32).copy()
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:h, 0:w]
    for stage in range(1, severity + 1):
        for _ in range(2 * stage):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            radius = rng.uniform(2.0, 2.0 + 1.5 * stage)
            mask = (ys - cy) ** 2 + (xs - cx) ** 2 <= radius**2
            out[mask] = SPATTER_COLOR
    return np.clip(out, 0.0, 1.0)


CORRUPTIONS = {"brightness": corrupt_brightness, "spatter": corrupt_spatter}


def _detect(model: DetectorModel, image: np.ndarray, score_threshold: float, nms_iou: float):
    import torch

    with torch.no_grad():
        output = model(image_to_tensor(image))
    return postprocess(output, score_threshold=score_threshold, nms_iou=nms_iou)


def _resolve_adversarial(entry) -> np.ndarray:
    if isinstance(entry, np.ndarray):
        return entry
    return load_image_png(entry)


def evaluate(
    model: DetectorModel,
    scenes: Sequence,
    adversarial_manifest: Mapping[str, object] | None = None,
    defenses: Sequence[tuple[str, int]] = (),
    score_threshold: float = 0.5,
    nms_iou: float = 0.5,
    spatter_seed: int = 0,
    config_fingerprint: str = "",
    out_dir: str | Path | None = None,
) -> EvaluationReport:
    """Full quantitative pass over a split; optionally writes report files.

    ``adversarial_manifest`` maps scene id to an adversarial image (array
    or PNG path). Scenes without an entry are listed as missing and
    skipped from adversarial metrics. Each ``(name, severity)`` defense is
    applied to both clean and adversarial images before re-evaluation.
    """
    clean_preds = [
        _detect(model, scene.image, score_threshold, nms_iou) for scene in scenes
    ]
    gts = [scene.objects for scene in scenes]
    report = EvaluationReport(
        clean_map50=compute_map(clean_preds, gts, 0.5),
        clean_map75=compute_map(clean_preds, gts, 0.75),
        adv_map50=None,
        adv_map75=None,
        nmse_mean=None,
        tv_mean=None,
        ssim_proxy_mean=None,
        config_fingerprint=config_fingerprint,
    )

    adv_images: dict[str, np.ndarray] = {}
    if adversarial_manifest is not None:
        report.missing_scenes = [s.id for s in scenes if s.id not in adversarial_manifest]
        covered = [s for s in scenes if s.id in adversarial_manifest]
        if not covered:
            raise EvaluationError("adversarial manifest covers no evaluation scene")
        adv_images = {s.id: _resolve_adversarial(adversarial_manifest[s.id]) for s in covered}
        adv_preds = [
            _detect(model, adv_images[s.id], score_threshold, nms_iou) for s in covered
        ]
        covered_gts = [s.objects for s in covered]
        report.adv_map50 = compute_map(adv_preds, covered_gts, 0.5)
        report.adv_map75 = compute_map(adv_preds, covered_gts, 0.75)

        rows = []
        for scene, preds in zip(covered, adv_preds):
            adv = adv_images[scene.id]
            rows.append(
                {
                    "scene_id": scene.id,
                    "nmse": nmse(scene.image, adv),
                    "tv_clean": tv(scene.image),
                    "tv_adv": tv(adv),
                    "ssim_proxy": ssim_proxy(scene.image, adv),
                    "n_gt": len(scene.objects),
                    "n_adv_detections": len(preds),
                }
            )
        report.per_scene = rows
        report.nmse_mean = float(np.mean([r["nmse"] for r in rows]))
        report.tv_mean = float(np.mean([r["tv_adv"] for r in rows]))
        report.ssim_proxy_mean = float(np.mean([r["ssim_proxy"] for r in rows]))

    for name, severity in defenses:
        if name not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {name!r}; known: {sorted(CORRUPTIONS)}")
        corrupt = CORRUPTIONS[name]
        kwargs = {"seed": spatter_seed} if name == "spatter" else {}
        c_preds = [
            _detect(model, corrupt(s.image, severity, **kwargs), score_threshold, nms_iou)
            for s in scenes
        ]
        entry = {"clean_map50": compute_map(c_preds, gts, 0.5)}
        if adv_images:
            covered = [s for s in scenes if s.id in adv_images]
            a_preds = [
                _detect(model, corrupt(adv_images[s.id], severity, **kwargs), score_threshold, nms_iou)
                for s in covered
            ]
            entry["adv_map50"] = compute_map(a_preds, [s.objects for s in covered], 0.5)
        report.corruptions.setdefault(name, {})[severity] = entry

    report.validate()
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report: EvaluationReport, out_dir: str | Path) -> tuple[Path, Path]:
    """Emit the machine-readable JSON (raw fractions) and a human table
    (values scaled by 100, as papers conventionally print them)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    with open(json_path, "w") as fh:
        json.dump(asdict(report), fh, indent=1)

    def x100(value):
        return "-" if value is None else f"{100 * value:8.2f}"

    lines = [
        "evaluation report (all values x100; SSIM column is a plain windowed-SSIM proxy)",
        f"config fingerprint: {report.config_fingerprint or '-'}",
        "",
        f"{'metric':<22}{'clean':>10}{'adversarial':>14}",
        f"{'mAP50':<22}{x100(report.clean_map50):>10}{x100(report.adv_map50):>14}",
        f"{'mAP75':<22}{x100(report.clean_map75):>10}{x100(report.adv_map75):>14}",
        "",
        f"{'NMSE (x100)':<22}{x100(report.nmse_mean):>10}",
        f"{'1-SSIM proxy (x100)':<22}{x100(report.ssim_proxy_mean):>10}",
        f"{'TV (0-255 scale)':<22}"
        + ("-" if report.tv_mean is None else f"{report.tv_mean:10.2f}"),
    ]
    if report.corruptions:
        lines.append("")
        lines.append(f"{'corruption':<14}{'severity':>9}{'clean mAP50':>13}{'adv mAP50':>12}")
        for name, by_severity in report.corruptions.items():
            for severity in sorted(by_severity):
                entry = by_severity[severity]
                lines.append(
                    f"{name:<14}{severity:>9}{x100(entry['clean_map50']):>13}"
                    + (x100(entry.get("adv_map50")) if "adv_map50" in entry else "           -")
                )
    if report.missing_scenes:
        lines.append("")
        lines.append(f"missing adversarial images for {len(report.missing_scenes)} scenes:")
        lines.extend(f"  {sid}" for sid in report.missing_scenes)
    text_path = out_dir / "report.txt"
    text_path.write_text("\n".join(lines) + "\n")
    return json_path, text_path


def plot_severity_curves(report: EvaluationReport, path: str | Path) -> None:
    """mAP50 versus corruption severity, one panel per corruption."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = sorted(report.corruptions) or ["(none)"]
    fig, axes = plt.subplots(1, len(names), figsize=(5 * len(names), 4), squeeze=False)
    for ax, name in zip(axes[0], names):
        by_severity = report.corruptions.get(name, {})
        severities = sorted(by_severity)
        ax.plot(severities, [by_severity[s]["clean_map50"] for s in severities], "o-", label="clean")
        if any("adv_map50" in by_severity[s] for s in severities):
            ax.plot(
                severities,
                [by_severity[s].get("adv_map50") for s in severities],
                "s--",
                label="adversarial",
            )
        ax.set_xlabel("severity")
        ax.set_ylabel("mAP50")
        ax.set_title(name)
        ax.set_ylim(-0.02, 1.02)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
