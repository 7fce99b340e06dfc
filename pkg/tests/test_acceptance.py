"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The heavyweight fixtures (dataset splits, a trained detector, a full attack
run over the test split) are module-scoped and shared by every criterion
that needs them, so the whole gate runs the pipeline exactly once plus one
deliberate repeat for the determinism check.
"""

import numpy as np
import pytest
import torch

import test_evaluation as ev
import test_targeting as tg

from sfattack.attack import ABLATION_VARIANTS, AttackConfig, attack_scenes, variant_config
from sfattack.dataset import generate_dataset
from sfattack.detector import DetectorConfig, DetectorModel, image_to_tensor, postprocess, train
from sfattack.evaluation import compute_map, corrupt_brightness, nmse, ssim_proxy
from sfattack.losses import cls_loss, freq_loss, loc_loss, normalize_boxes, total_loss
from sfattack.targeting import (
    SelectionConfig,
    build_attack_target_set,
    select_classification_targets,
    select_regression_targets,
)
from sfattack.wavelet import dwt2, idwt2, reconstruct_hfc, reconstruct_lfc

EPSILON = 8.0 / 255.0


def _report(index: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {index} ({name}): {'PASS' if ok else 'FAIL'} - {detail}"
    print(line, flush=True)
    assert ok, line


def _detect(model, image):
    with torch.no_grad():
        return postprocess(model(image_to_tensor(image)))


def _map_pair(model, scenes, images=None):
    preds = [
        _detect(model, images[i] if images is not None else scene.image)
        for i, scene in enumerate(scenes)
    ]
    gts = [list(scene.objects) for scene in scenes]
    return compute_map(preds, gts, 0.5), compute_map(preds, gts, 0.75)


@pytest.fixture(scope="module")
def splits():
    return {
        "train": generate_dataset(seed=7, n_scenes=500, image_size=128),
        "test": generate_dataset(seed=2000, n_scenes=100, image_size=128),
    }


@pytest.fixture(scope="module")
def model(splits):
    torch.manual_seed(0)
    detector = DetectorModel(DetectorConfig())
    train(detector, splits["train"], epochs=30, lr=2e-3, seed=0)
    detector.eval()
    return detector


@pytest.fixture(scope="module")
def attack_run(model, splits):
    return attack_scenes(model, splits["test"], AttackConfig(seed=0))


@pytest.fixture(scope="module")
def adv_images(attack_run, splits):
    return [attack_run[scene.id].adversarial_image for scene in splits["test"]]


# --- criterion 1 ---------------------------------------------------------


def test_criterion_1_wavelet_correctness():
    rng = np.random.default_rng(100)
    max_roundtrip = 0.0
    max_parseval = 0.0
    for _ in range(100):
        h = 2 * int(rng.integers(1, 21))
        w = 2 * int(rng.integers(1, 21))
        x = torch.tensor(rng.uniform(0.0, 1.0, size=(3, h, w)))
        decomp = dwt2(x)
        back = idwt2(decomp)
        max_roundtrip = max(max_roundtrip, float((back - x).abs().max()))
        band_energy = sum(float((band**2).sum()) for band in decomp.bands())
        image_energy = float((x**2).sum())
        max_parseval = max(max_parseval, abs(band_energy - image_energy) / image_energy)

    const = torch.full((3, 16, 16), 0.37, dtype=torch.float64)
    lfc_err = float((reconstruct_lfc(const) - const).abs().max())
    hfc_err = float(reconstruct_hfc(const).abs().max())

    ok = max_roundtrip < 1e-6 and max_parseval < 1e-6 and lfc_err < 1e-6 and hfc_err < 1e-6
    _report(
        1,
        "wavelet correctness",
        ok,
        f"roundtrip={max_roundtrip:.2e} parseval={max_parseval:.2e} "
        f"phi_const={lfc_err:.2e} psi_const={hfc_err:.2e}",
    )


# --- criterion 2 ---------------------------------------------------------


def test_criterion_2_gradient_fidelity():
    torch.manual_seed(0)
    config = DetectorConfig(image_size=8, stride=2, k_classes=3, base_channels=4)
    detector = DetectorModel(config).double().eval()
    gts = [tg.FakeObject((1.0, 1.0, 6.0, 6.0), 1)]
    rng = np.random.default_rng(5)
    x = torch.tensor(rng.uniform(0.2, 0.8, size=(3, 8, 8)))
    delta0 = torch.tensor(rng.uniform(-0.01, 0.01, size=(3, 8, 8)))

    with torch.no_grad():
        targets = build_attack_target_set(detector(x + delta0), gts, SelectionConfig())
    flat_reg = targets.flat_regression
    flat_cls = targets.flat_classification
    assert flat_reg and flat_cls, "reduced pipeline must exercise both tracks"
    target_boxes = torch.tensor(targets.target_boxes, dtype=torch.float64)

    def j_total(delta):
        out = detector(x + delta)
        j_loc = loc_loss(normalize_boxes(out.boxes[flat_reg], 8, 8), target_boxes)
        j_cls = cls_loss(out.probs[flat_cls], targets.gt_labels)
        j_lfc, j_hfc, _ = freq_loss(x, x + delta)
        total, _ = total_loss(j_loc, j_cls, j_lfc, j_hfc, lam=100.0)
        return total

    delta = delta0.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(j_total(delta), delta)

    step = 1e-3
    finite = torch.zeros_like(delta0)
    with torch.no_grad():
        for idx in np.ndindex(3, 8, 8):
            probe = torch.zeros_like(delta0)
            probe[idx] = step
            finite[idx] = (j_total(delta0 + probe) - j_total(delta0 - probe)) / (2 * step)

    scale = torch.maximum(grad.abs(), finite.abs()).clamp_min(1e-6)
    max_rel = float(((grad - finite).abs() / scale).max())
    _report(2, "gradient fidelity", max_rel < 1e-4, f"max_rel_err={max_rel:.2e} (192 coords)")


# --- criterion 3 ---------------------------------------------------------


def test_criterion_3_oracle_equivalence():
    rng = np.random.default_rng(300)
    selection_mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 65))
        m = int(rng.integers(1, 5))
        output, gts = tg._random_scene(rng, n, m)
        cfg = SelectionConfig(
            k=int(rng.integers(1, 7)), iou_floor=float(rng.choice([0.0, 0.05, 0.3]))
        )
        reg = select_regression_targets(output, gts, cfg)
        cls = select_classification_targets(output, gts, cfg)
        ious = tg.iou_matrix(output.boxes, np.array([g.box for g in gts]))
        predicted = output.probs[:, :3].argmax(axis=1)
        for j, g in enumerate(gts):
            everyone = [True] * n
            matching = (predicted == g.label).tolist()
            if reg[j] != tg.brute_force_top_k(ious[:, j], everyone, cfg.k, cfg.iou_floor):
                selection_mismatches += 1
            if cls[j] != tg.brute_force_top_k(ious[:, j], matching, cfg.k, cfg.iou_floor):
                selection_mismatches += 1

    map_mismatches = 0
    rng = np.random.default_rng(301)
    for _ in range(500):
        preds, gts = ev._random_instance(rng)
        for threshold in (0.5, 0.75):
            got = compute_map(preds, gts, threshold)
            want = ev.oracle_map(preds, gts, threshold)
            if got != pytest.approx(want, abs=1e-12):
                map_mismatches += 1

    hand = compute_map(
        [[
            ev.Pred((0, 0, 10, 10), 0, 0.9),
            ev.Pred((40, 40, 50, 50), 0, 0.8),
            ev.Pred((20, 0, 30, 10), 0, 0.7),
        ]],
        [[ev.Gt((0, 0, 10, 10), 0), ev.Gt((20, 0, 30, 10), 0)]],
        0.5,
    )
    hand_ok = hand == pytest.approx(5.0 / 6.0, abs=1e-12)

    ok = selection_mismatches == 0 and map_mismatches == 0 and hand_ok
    _report(
        3,
        "oracle equivalence",
        ok,
        f"selection_mismatches={selection_mismatches}/1000 "
        f"map_mismatches={map_mismatches}/500 hand_ap={hand:.6f}",
    )


# --- criterion 4 ---------------------------------------------------------


def test_criterion_4_budget_invariants(attack_run):
    worst_linf = 0.0
    lo, hi = 1.0, 0.0
    rows = 0
    for result in attack_run.values():
        for row in result.trace:
            rows += 1
            assert row["in_budget"]
            worst_linf = max(worst_linf, row["delta_linf"])
            lo = min(lo, row["adv_min"])
            hi = max(hi, row["adv_max"])
    ok = worst_linf <= EPSILON and lo >= 0.0 and hi <= 1.0
    _report(
        4,
        "budget invariants",
        ok,
        f"max_linf={worst_linf:.10f} (eps={EPSILON:.10f}) adv_range=[{lo}, {hi}] rows={rows}",
    )


# --- criteria 5 & 6 ------------------------------------------------------


def test_criterion_5_attack_efficacy(model, splits, adv_images):
    clean50, clean75 = _map_pair(model, splits["test"])
    adv50, adv75 = _map_pair(model, splits["test"], adv_images)
    ok = clean50 >= 0.70 and adv50 <= 0.20 * clean50 and adv75 <= 0.20 * clean75
    _report(
        5,
        "attack efficacy",
        ok,
        f"clean50={clean50:.3f} clean75={clean75:.3f} adv50={adv50:.3f} adv75={adv75:.3f} "
        f"(ratios {adv50 / clean50:.3f}, {adv75 / clean75:.3f}; required <= 0.20)",
    )


def test_criterion_6_stealth(splits, adv_images):
    scenes = splits["test"]
    nmse_mean = float(np.mean([nmse(s.image, a) for s, a in zip(scenes, adv_images)]))
    ssim_mean = float(np.mean([ssim_proxy(s.image, a) for s, a in zip(scenes, adv_images)]))
    ok = nmse_mean <= 1e-3 and ssim_mean <= 0.05
    _report(
        6,
        "stealth",
        ok,
        f"nmse_mean={nmse_mean:.2e} (<= 1e-3) ssim_proxy_mean={ssim_mean:.4f} (<= 0.05)",
    )


# --- criterion 7 ---------------------------------------------------------


def test_criterion_7_ablation_ordering(model, splits, attack_run):
    subset = splits["test"][:30]
    scores = {}
    base = AttackConfig(seed=0)
    for name in ABLATION_VARIANTS:
        if name == "full":
            results = {scene.id: attack_run[scene.id] for scene in subset}
        else:
            results = attack_scenes(model, subset, variant_config(base, name))
        advs = [results[scene.id].adversarial_image for scene in subset]
        scores[name], _ = _map_pair(model, subset, advs)
    full = scores["full"]
    ok = all(full <= scores[name] for name in scores) and full < scores["baseline-pgd"]
    detail = " ".join(f"{name}={value:.3f}" for name, value in scores.items())
    _report(7, "ablation ordering", ok, detail)


# --- criterion 8 ---------------------------------------------------------


def test_criterion_8_corruption_resilience(model, splits, adv_images):
    scenes = splits["test"]
    ratios = []
    ok = True
    for severity in range(1, 6):
        clean_c = [corrupt_brightness(scene.image, severity) for scene in scenes]
        adv_c = [corrupt_brightness(adv, severity) for adv in adv_images]
        clean50, _ = _map_pair(model, scenes, clean_c)
        adv50, _ = _map_pair(model, scenes, adv_c)
        ratios.append(f"s{severity}={adv50:.3f}/{clean50:.3f}")
        if adv50 > 0.5 * clean50:
            ok = False
    _report(8, "corruption resilience", ok, "adv50/clean50 per severity: " + " ".join(ratios))


# --- criterion 9 ---------------------------------------------------------


def test_criterion_9_determinism(model, splits, attack_run):
    repeat = attack_scenes(model, splits["test"], AttackConfig(seed=0))
    differing = [
        scene.id
        for scene in splits["test"]
        if attack_run[scene.id].delta.delta.tobytes() != repeat[scene.id].delta.delta.tobytes()
    ]
    _report(
        9,
        "determinism",
        not differing,
        f"bit-identical deltas for {len(splits['test']) - len(differing)}/{len(splits['test'])} scenes",
    )
