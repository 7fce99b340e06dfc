"""Command-line pipeline: gen-data, train, attack, eval, ablate, decompose.

Every invocation resolves its configuration in three layers — built-in
defaults, then a JSON key-value config file (``--config``), then explicit
command-line flags — and records the resolved result plus its SHA-256
fingerprint inside a fresh timestamped run directory, so any output can be
traced back to the exact settings that produced it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .attack import (
    ABLATION_VARIANTS,
    AttackConfig,
    run_attack,
    scene_seed,
    variant_config,
)
from .dataset import (
    AnnotationError,
    ConfigurationError,
    generate_dataset,
    load_image_png,
    read_annotations,
    save_image_png,
    write_annotations,
)
from .detector import (
    DetectorConfig,
    DetectorModel,
    image_to_tensor,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .evaluation import (
    EvaluationError,
    compute_map,
    evaluate,
    nmse,
    plot_severity_curves,
    ssim_proxy,
)
from .targeting import SelectionConfig
from .wavelet import crop, dwt2, pad_even, reconstruct_hfc, reconstruct_lfc

RUN_ROOT_ENV = "SFATTACK_RUNS"

GEN_DATA_DEFAULTS = {
    "seed": 7,
    "n_scenes": 500,
    "image_size": 128,
    "k_classes": 3,
    "out": None,
}
TRAIN_DEFAULTS = {
    "data": None,
    "val_data": None,
    "epochs": 30,
    "lr": 2e-3,
    "batch_size": 8,
    "seed": 0,
    "label_smoothing": 0.1,
    "noise": 0.0,
    "k_classes": 3,
    "image_size": 128,
    "base_channels": 32,
}
ATTACK_DEFAULTS = {
    "checkpoint": None,
    "data": None,
    "variant": "full",
    "epsilon": 8.0 / 255.0,
    "iterations": 50,
    "lr": 0.03,
    "weight_decay": 0.02,
    "lam": 100.0,
    "seed": 0,
    "selection_k": 1,
    "freeze_targets": False,
    "limit": None,
    "jobs": 1,
    "resume": None,
}
EVAL_DEFAULTS = {
    "checkpoint": None,
    "data": None,
    "manifest": None,
    "defense": [],
    "score_threshold": 0.5,
    "nms_iou": 0.5,
    "spatter_seed": 0,
}
ABLATE_DEFAULTS = {
    "checkpoint": None,
    "data": None,
    "n_scenes": 30,
    "iterations": 50,
    "seed": 0,
    "selection_k": 1,
    "jobs": 1,
}
DECOMPOSE_DEFAULTS = {"image": None}


class CliError(RuntimeError):
    """User-facing failure: bad paths, malformed config, contract breaches."""


def config_fingerprint(config: dict) -> str:
    """SHA-256 over the canonical JSON form of a resolved configuration."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def resolve_config(defaults: dict, config_file: str | None, flags: dict) -> dict:
    """Layer defaults < config file < explicit flags; reject unknown keys."""
    merged = dict(defaults)
    if config_file is not None:
        path = Path(config_file)
        if not path.exists():
            raise CliError(f"no such config file: {path}")
        try:
            with open(path) as fh:
                file_cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise CliError(f"config file {path} must hold a JSON object")
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise CliError(
                f"config file {path} has unknown keys {unknown}; known: {sorted(defaults)}"
            )
        merged.update(file_cfg)
    for key, value in flags.items():
        if value is not None:
            merged[key] = value
    return merged


def make_run_dir(command: str, run_root: str | None) -> Path:
    """Create ``<root>/<command>-<timestamp>[-<n>]``; root defaults to the
    SFATTACK_RUNS environment variable, then ./runs."""
    root = Path(run_root or os.environ.get(RUN_ROOT_ENV, "runs"))
    stamp = time.strftime("%Y%m%d-%H%M%S")
    candidate = root / f"{command}-{stamp}"
    counter = 1
    while candidate.exists():
        candidate = root / f"{command}-{stamp}-{counter}"
        counter += 1
    candidate.mkdir(parents=True)
    return candidate


def write_run_config(run_dir: Path, command: str, config: dict) -> str:
    fingerprint = config_fingerprint(config)
    payload = {"command": command, "config": config, "fingerprint": fingerprint}
    with open(run_dir / "config.json", "w") as fh:
        json.dump(payload, fh, indent=1)
    return fingerprint


def _require_file(path_value: str | None, what: str) -> Path:
    if not path_value:
        raise CliError(f"missing required --{what} path")
    path = Path(path_value)
    if not path.exists():
        raise CliError(f"no such {what}: {path}")
    return path


def _flag_values(args: argparse.Namespace, defaults: dict) -> dict:
    return {key: getattr(args, key) for key in defaults}


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = resolve_config(GEN_DATA_DEFAULTS, args.config, _flag_values(args, GEN_DATA_DEFAULTS))
    run_dir = make_run_dir("gen-data", args.run_root)
    fingerprint = write_run_config(run_dir, "gen-data", config)
    out = Path(config["out"]) if config["out"] else run_dir / "annotations.json"
    scenes = generate_dataset(
        seed=config["seed"],
        n_scenes=config["n_scenes"],
        image_size=config["image_size"],
        k_classes=config["k_classes"],
    )
    write_annotations(scenes, out, k_classes=config["k_classes"])
    per_class = [0] * config["k_classes"]
    for scene in scenes:
        for obj in scene.objects:
            per_class[obj.label] += 1
    print(f"run dir: {run_dir} (fingerprint {fingerprint[:12]})")
    print(f"wrote {len(scenes)} scenes to {out}; per-class object counts {per_class}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(TRAIN_DEFAULTS, args.config, _flag_values(args, TRAIN_DEFAULTS))
    data_path = _require_file(config["data"], "data")
    scenes = read_annotations(data_path)
    val_scenes = None
    if config["val_data"]:
        val_scenes = read_annotations(_require_file(config["val_data"], "val-data"))

    detector_config = DetectorConfig(
        image_size=config["image_size"],
        k_classes=config["k_classes"],
        base_channels=config["base_channels"],
    )
    got = scenes[0].image.shape
    want = (detector_config.image_size, detector_config.image_size, 3)
    if tuple(got) != want:
        raise CliError(f"dataset images are {got}, detector expects {want}")

    run_dir = make_run_dir("train", args.run_root)
    fingerprint = write_run_config(run_dir, "train", config)
    import torch

    torch.manual_seed(config["seed"])
    model = DetectorModel(detector_config)
    history = train(
        model,
        scenes,
        epochs=config["epochs"],
        lr=config["lr"],
        val_scenes=val_scenes,
        seed=config["seed"],
        batch_size=config["batch_size"],
        noise=config["noise"],
        label_smoothing=config["label_smoothing"],
    )
    checkpoint_path = run_dir / "checkpoint.pt"
    save_checkpoint(model, checkpoint_path)
    with open(run_dir / "history.json", "w") as fh:
        json.dump(history, fh, indent=1)
    _plot_training_curves(history, run_dir / "loss_curve.png")
    last = history["train_loss"][-1] if history["train_loss"] else float("nan")
    print(f"run dir: {run_dir} (fingerprint {fingerprint[:12]})")
    print(f"trained {config['epochs']} epochs; final train loss {last:.4f}")
    print(f"checkpoint: {checkpoint_path}")
    return 0


def _plot_training_curves(history: dict, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(history["train_loss"], label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if history.get("val_map50"):
        twin = ax.twinx()
        twin.plot(history["val_map50"], "g--", label="val mAP50")
        twin.set_ylabel("mAP50")
        twin.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _attack_config_from(config: dict) -> AttackConfig:
    base = AttackConfig(
        epsilon=config["epsilon"],
        iterations=config["iterations"],
        lr=config["lr"],
        weight_decay=config["weight_decay"],
        lam=config["lam"],
        seed=config["seed"],
        freeze_targets=config["freeze_targets"],
        selection=SelectionConfig(k=config["selection_k"]),
    )
    return variant_config(base, config["variant"])


def _run_scene_attacks(
    model: DetectorModel,
    scenes: Sequence,
    config: AttackConfig,
    jobs: int,
) -> tuple[dict, list[str]]:
    """Attack scenes (optionally in parallel); results keyed by scene id.

    Per-scene seeds depend only on the base seed and the scene id, so the
    outcome is identical for any job count and any scene order. Scenes whose
    run violates a budget assertion are reported, not silently dropped.
    """
    failures: list[str] = []

    def attack_one(scene):
        seeded = replace(config, seed=scene_seed(config.seed, scene.id))
        return run_attack(model, scene, seeded)

    results: dict = {}
    if jobs <= 1:
        for scene in scenes:
            try:
                results[scene.id] = attack_one(scene)
            except AssertionError as exc:
                failures.append(f"{scene.id}: {exc}")
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {scene.id: pool.submit(attack_one, scene) for scene in scenes}
        for sid, future in futures.items():
            try:
                results[sid] = future.result()
            except AssertionError as exc:
                failures.append(f"{sid}: {exc}")
    return results, failures


def cmd_attack(args: argparse.Namespace) -> int:
    config = resolve_config(ATTACK_DEFAULTS, args.config, _flag_values(args, ATTACK_DEFAULTS))
    checkpoint_path = _require_file(config["checkpoint"], "checkpoint")
    data_path = _require_file(config["data"], "data")
    model = load_checkpoint(checkpoint_path)
    scenes = read_annotations(data_path)
    if config["limit"] is not None:
        scenes = scenes[: config["limit"]]
    attack_config = _attack_config_from(config)

    resume = config.pop("resume")
    if resume:
        run_dir = Path(resume)
        previous = run_dir / "config.json"
        if not previous.exists():
            raise CliError(f"cannot resume: {previous} does not exist")
        with open(previous) as fh:
            recorded = json.load(fh)
        stored = dict(recorded["config"])
        stored.pop("resume", None)
        if stored != config:
            raise CliError(
                f"cannot resume {run_dir}: stored configuration differs from the requested one"
            )
        fingerprint = recorded["fingerprint"]
    else:
        run_dir = make_run_dir("attack", args.run_root)
        fingerprint = write_run_config(run_dir, "attack", config)

    adv_dir = run_dir / "adv"
    trace_dir = run_dir / "traces"
    adv_dir.mkdir(exist_ok=True)
    trace_dir.mkdir(exist_ok=True)

    done = {
        scene.id
        for scene in scenes
        if (adv_dir / f"{scene.id}.png").exists() and (trace_dir / f"{scene.id}.json").exists()
    }
    pending = [scene for scene in scenes if scene.id not in done]
    results, failures = _run_scene_attacks(model, pending, attack_config, config["jobs"])

    summary_rows = []
    for scene in pending:
        result = results.get(scene.id)
        if result is None:
            continue
        save_image_png(result.adversarial_image, adv_dir / f"{scene.id}.png")
        with open(trace_dir / f"{scene.id}.json", "w") as fh:
            json.dump(
                {
                    "scene_id": scene.id,
                    "seed": scene_seed(attack_config.seed, scene.id),
                    "best_iteration": result.best_iteration,
                    "elapsed": result.elapsed,
                    "delta_linf": result.delta.linf(),
                    "survivors": len(result.final_detections),
                    "iterations": result.trace,
                },
                fh,
                indent=1,
            )
        summary_rows.append(
            {
                "scene_id": scene.id,
                "survivors": len(result.final_detections),
                "best_iteration": result.best_iteration,
                "elapsed": round(result.elapsed, 3),
            }
        )

    completed = sorted(done) + [row["scene_id"] for row in summary_rows]
    manifest = {
        "format": "sfattack-manifest-v1",
        "checkpoint": str(checkpoint_path),
        "data": str(data_path),
        "fingerprint": fingerprint,
        "scenes": {sid: f"adv/{sid}.png" for sid in sorted(completed)},
    }
    with open(run_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)

    print(f"run dir: {run_dir} (fingerprint {fingerprint[:12]})")
    print(
        f"attacked {len(summary_rows)} scenes ({len(done)} already complete, "
        f"{len(failures)} failed) with variant {config['variant']}"
    )
    for line in failures:
        print(f"budget assertion failed for {line}", file=sys.stderr)
    missing = len(scenes) - len(completed)
    if failures or missing:
        return 4
    return 0


def _parse_defenses(selectors: Sequence[str]) -> list[tuple[str, int]]:
    """Expand ``name:severity`` selectors; bare ``name`` means severities 1-5."""
    parsed: list[tuple[str, int]] = []
    for selector in selectors:
        name, _, raw = selector.partition(":")
        if raw:
            try:
                severities = [int(raw)]
            except ValueError as exc:
                raise CliError(f"bad defense selector {selector!r}: severity must be an integer") from exc
        else:
            severities = [1, 2, 3, 4, 5]
        parsed.extend((name, severity) for severity in severities)
    return parsed


def cmd_eval(args: argparse.Namespace) -> int:
    config = resolve_config(EVAL_DEFAULTS, args.config, _flag_values(args, EVAL_DEFAULTS))
    checkpoint_path = _require_file(config["checkpoint"], "checkpoint")
    data_path = _require_file(config["data"], "data")
    model = load_checkpoint(checkpoint_path)
    scenes = read_annotations(data_path)

    adversarial_manifest = None
    if config["manifest"]:
        manifest_path = _require_file(config["manifest"], "manifest")
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        if "scenes" not in manifest:
            raise CliError(f"manifest {manifest_path} has no 'scenes' mapping")
        adversarial_manifest = {
            sid: manifest_path.parent / rel for sid, rel in manifest["scenes"].items()
        }
        for sid, path in adversarial_manifest.items():
            if not path.exists():
                raise CliError(f"manifest entry for scene {sid} points at missing file {path}")

    defenses = _parse_defenses(config["defense"])
    run_dir = make_run_dir("eval", args.run_root)
    fingerprint = write_run_config(run_dir, "eval", config)
    report = evaluate(
        model,
        scenes,
        adversarial_manifest=adversarial_manifest,
        defenses=defenses,
        score_threshold=config["score_threshold"],
        nms_iou=config["nms_iou"],
        spatter_seed=config["spatter_seed"],
        config_fingerprint=fingerprint,
        out_dir=run_dir,
    )
    if report.corruptions:
        plot_severity_curves(report, run_dir / "severity.png")

    print(f"run dir: {run_dir} (fingerprint {fingerprint[:12]})")
    print((run_dir / "report.txt").read_text(), end="")
    if report.missing_scenes:
        print(
            f"{len(report.missing_scenes)} scenes lack adversarial images",
            file=sys.stderr,
        )
        return 3
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = resolve_config(ABLATE_DEFAULTS, args.config, _flag_values(args, ABLATE_DEFAULTS))
    checkpoint_path = _require_file(config["checkpoint"], "checkpoint")
    data_path = _require_file(config["data"], "data")
    model = load_checkpoint(checkpoint_path)
    scenes = read_annotations(data_path)[: config["n_scenes"]]
    if not scenes:
        raise CliError(f"no scenes to ablate in {data_path}")

    run_dir = make_run_dir("ablate", args.run_root)
    fingerprint = write_run_config(run_dir, "ablate", config)
    base = AttackConfig(
        iterations=config["iterations"],
        seed=config["seed"],
        selection=SelectionConfig(k=config["selection_k"]),
    )

    gts = [list(scene.objects) for scene in scenes]
    rows = []
    all_failures: list[str] = []
    for variant in ABLATION_VARIANTS:
        attack_config = variant_config(base, variant)
        results, failures = _run_scene_attacks(model, scenes, attack_config, config["jobs"])
        all_failures.extend(f"{variant}/{line}" for line in failures)
        predictions = []
        covered = [scene for scene in scenes if scene.id in results]
        for scene in covered:
            adv = results[scene.id].adversarial_image
            predictions.append(_detect_adversarial(model, adv))
        covered_gts = [list(scene.objects) for scene in covered]
        rows.append(
            {
                "variant": variant,
                "adv_map50": compute_map(predictions, covered_gts, 0.5),
                "adv_map75": compute_map(predictions, covered_gts, 0.75),
                "nmse_mean": float(
                    np.mean([nmse(s.image, results[s.id].adversarial_image) for s in covered])
                ),
                "ssim_proxy_mean": float(
                    np.mean([ssim_proxy(s.image, results[s.id].adversarial_image) for s in covered])
                ),
                "mean_survivors": float(
                    np.mean([len(results[s.id].final_detections) for s in covered])
                ),
                "fingerprint": fingerprint,
            }
        )

    with open(run_dir / "ablation.json", "w") as fh:
        json.dump({"fingerprint": fingerprint, "rows": rows}, fh, indent=1)
    lines = [
        f"{'variant':<14}{'adv mAP50':>11}{'adv mAP75':>11}{'NMSE':>11}{'1-SSIM':>9}{'survivors':>11}"
    ]
    for row in rows:
        lines.append(
            f"{row['variant']:<14}{row['adv_map50']:>11.3f}{row['adv_map75']:>11.3f}"
            f"{row['nmse_mean']:>11.2e}{row['ssim_proxy_mean']:>9.3f}{row['mean_survivors']:>11.2f}"
        )
    table = "\n".join(lines) + "\n"
    (run_dir / "ablation.txt").write_text(table)
    print(f"run dir: {run_dir} (fingerprint {fingerprint[:12]})")
    print(table, end="")
    for line in all_failures:
        print(f"budget assertion failed for {line}", file=sys.stderr)
    return 4 if all_failures else 0


def _detect_adversarial(model: DetectorModel, image: np.ndarray):
    import torch

    from .detector import postprocess

    with torch.no_grad():
        return postprocess(model(image_to_tensor(image)))


def cmd_decompose(args: argparse.Namespace) -> int:
    config = resolve_config(DECOMPOSE_DEFAULTS, args.config, _flag_values(args, DECOMPOSE_DEFAULTS))
    image_path = _require_file(config["image"], "image")
    image = load_image_png(image_path)
    tensor = image_to_tensor(image)
    padded, record = pad_even(tensor)

    run_dir = make_run_dir("decompose", args.run_root)
    fingerprint = write_run_config(run_dir, "decompose", config)
    lfc = crop(reconstruct_lfc(padded), record)
    hfc = crop(reconstruct_hfc(padded), record)
    save_image_png(np.clip(lfc.numpy().transpose(1, 2, 0), 0, 1), run_dir / "lfc.png")
    save_image_png(
        np.clip(hfc.numpy().transpose(1, 2, 0) + 0.5, 0, 1), run_dir / "hfc.png"
    )

    decomp = dwt2(padded)
    energies = {
        name: float((band**2).sum())
        for name, band in zip(("ll", "lh", "hl", "hh"), decomp.bands())
    }
    total = sum(energies.values())
    with open(run_dir / "band_energy.json", "w") as fh:
        json.dump(
            {
                "total_energy": total,
                "fractions": {k: v / total for k, v in energies.items()},
            },
            fh,
            indent=1,
        )

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(2, 2, figsize=(8, 8))
    for ax, (name, band) in zip(axes.flat, zip(("ll", "lh", "hl", "hh"), decomp.bands())):
        gray = band.numpy().mean(axis=0)
        ax.imshow(gray, cmap="gray")
        ax.set_title(f"{name} (energy {energies[name] / total:.1%})")
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(run_dir / "bands.png", dpi=120)
    plt.close(fig)

    print(f"run dir: {run_dir} (fingerprint {fingerprint[:12]})")
    print("band energy fractions: " + ", ".join(f"{k}={v / total:.3f}" for k, v in energies.items()))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sfattack",
        description="Spatial-frequency adversarial attack pipeline for a toy detector.",
    )
    parser.add_argument(
        "--run-root",
        default=None,
        help=f"directory for run outputs (default: ${RUN_ROOT_ENV} or ./runs)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON key-value config file")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "render a synthetic shapes split with annotations")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-scenes", type=int, dest="n_scenes")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--k-classes", type=int, dest="k_classes")
    p.add_argument("--out", help="annotation file path (default: inside the run dir)")

    p = add("train", cmd_train, "train the detector on an annotation file")
    p.add_argument("--data")
    p.add_argument("--val-data", dest="val_data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--label-smoothing", type=float, dest="label_smoothing")
    p.add_argument("--noise", type=float)
    p.add_argument("--k-classes", type=int, dest="k_classes")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--base-channels", type=int, dest="base_channels")

    p = add("attack", cmd_attack, "run the attack over a split, writing a manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--variant", choices=sorted(ABLATION_VARIANTS))
    p.add_argument("--epsilon", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--lam", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--selection-k", type=int, dest="selection_k")
    p.add_argument(
        "--freeze-targets",
        action=argparse.BooleanOptionalAction,
        default=None,
        dest="freeze_targets",
    )
    p.add_argument("--limit", type=int, help="attack only the first N scenes")
    p.add_argument("--jobs", type=int)
    p.add_argument("--resume", help="existing attack run directory; completed scenes are skipped")

    p = add("eval", cmd_eval, "evaluate clean and adversarial detections, write reports")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--manifest", help="manifest.json from an attack run")
    p.add_argument(
        "--defense",
        action="append",
        help="corruption selector like brightness:3 (bare name = severities 1-5); repeatable",
    )
    p.add_argument("--score-threshold", type=float, dest="score_threshold")
    p.add_argument("--nms-iou", type=float, dest="nms_iou")
    p.add_argument("--spatter-seed", type=int, dest="spatter_seed")

    p = add("ablate", cmd_ablate, "run every loss variant with shared seeds, tabulate")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--n-scenes", type=int, dest="n_scenes")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--selection-k", type=int, dest="selection_k")
    p.add_argument("--jobs", type=int)

    p = add("decompose", cmd_decompose, "split an image into frequency bands")
    p.add_argument("--image")

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, AnnotationError, ConfigurationError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
