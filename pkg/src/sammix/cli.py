"""Command-line entry points.

Subcommands: synth-data, preprocess, split, train, evaluate, predict, report,
overlay, matrix.  Every run writes a resolved-config snapshot beside its
outputs and appends line-delimited JSON events.  No subcommand modifies its
inputs.  Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import dataio, metrics, trainer
from .dataio import DatasetError, PhantomConfig
from .checkpoint import CheckpointError, load_checkpoint_meta
from .metrics import EvalReport
from .trainer import CONFIG_VERSION, TrainConfig, TrainingDivergedError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

MODE_LABELS = {
    "sam_mix_e2e": "SAM-Mix",
    "sam_pp_two_stage": "SAM-PP",
    "cls_only": "Cls-Only",
}

DEFAULT_MATRIX = {"modes": ["sam_mix_e2e", "sam_pp_two_stage"], "n_labeled": [5, 50, 100], "seeds": [0, 1, 2]}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits the process on errors; surface them as exit code 1 instead
    def error(self, message: str):
        raise UsageError(message)


def _log_event(out_dir: Path, entry: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "events.jsonl", "a") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# config document handling
# ---------------------------------------------------------------------------


def default_config_document() -> dict:
    return {"config_version": CONFIG_VERSION, "trainer": TrainConfig().to_dict(), "matrix": dict(DEFAULT_MATRIX)}


def _set_dotted(doc: dict, dotted: str, raw_value: str) -> None:
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    parts = dotted.split(".")
    node = doc
    for key in parts[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise UsageError(f"unknown config path {dotted!r}")
        node = node[key]
    if parts[-1] not in node:
        raise UsageError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def load_config_document(config_path: str | None, overrides: list[str]) -> dict:
    doc = default_config_document()
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {config_path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        version = loaded.get("config_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise UsageError(f"unsupported config_version {version!r}")
        for key, value in loaded.items():
            if key == "config_version":
                continue
            if key not in ("trainer", "matrix"):
                raise UsageError(f"unknown config section {key!r}")
            if not isinstance(value, dict):
                raise UsageError(f"config section {key!r} must be an object")
            for sub, sub_value in value.items():
                _merge_config_key(doc, key, sub, sub_value)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        _set_dotted(doc, dotted, raw)
    return doc


def _merge_config_key(doc: dict, section: str, key: str, value) -> None:
    if key not in doc[section]:
        raise UsageError(f"unknown config key {section}.{key!r}")
    if isinstance(doc[section][key], dict):
        if not isinstance(value, dict):
            raise UsageError(f"config key {section}.{key!r} must be an object")
        for sub, sub_value in value.items():
            if sub not in doc[section][key]:
                raise UsageError(f"unknown config key {section}.{key}.{sub!r}")
            doc[section][key][sub] = sub_value
    else:
        doc[section][key] = value


def build_train_config(doc: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(doc["trainer"])
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid trainer config: {exc}") from exc


def _write_snapshot(out_dir: Path, doc: dict) -> None:
    # the full document (trainer + matrix) as resolved from file and --set
    # overrides; training itself writes resolved_config.json alongside
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_document.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------


def _cmd_synth_data(args) -> int:
    out = Path(args.out)
    cfg = PhantomConfig(image_size=args.image_size, raw_size=args.raw_size)
    datasets = dataio.generate_phantoms(args.n_volumes, args.seed, out, cfg, keep_raw=not args.no_raw)
    _log_event(out, {
        "event": "synth-data",
        "n_volumes": args.n_volumes,
        "seed": args.seed,
        "splits": {name: len(ds) for name, ds in datasets.items()},
    })
    for name in dataio.SPLIT_NAMES:
        if name in datasets:
            ds = datasets[name]
            positives = sum(s.cls_label for s in ds.samples)
            print(f"{name}: {len(ds)} slices ({positives} positive)")
    return EXIT_OK


def _cmd_preprocess(args) -> int:
    raw_dir = Path(args.raw_dir)
    out = Path(args.out)
    stems = sorted(
        p.name[: -len(".vol.json")]
        for p in raw_dir.glob("*.vol.json")
        if not p.name.endswith("_mask.vol.json")
    )
    if not stems:
        raise DatasetError(f"no volumes found under {raw_dir}")
    cfg = PhantomConfig(
        image_size=args.size,
        window_width=args.width,
        window_center=args.center,
        slice_fraction=args.fraction,
    )
    counts = dataio._split_counts(len(stems), cfg)
    assignments = ["train"] * counts["train"] + ["val"] * counts["val"] + ["test"] * counts["test"]
    buckets: dict[str, list] = {name: [] for name in dataio.SPLIT_NAMES}
    for stem, split in zip(stems, assignments):
        volume = dataio.load_raw_volume(raw_dir / stem)
        mask_stem = raw_dir / f"{stem}_mask"
        if not mask_stem.with_suffix(".vol.json").exists():
            raise DatasetError(f"no mask volume for {stem}")
        mask = dataio.load_raw_volume(mask_stem).voxels.astype(np.uint8)
        buckets[split].extend(dataio.volume_to_samples(volume, mask, stem, cfg))
    written = {}
    for name in dataio.SPLIT_NAMES:
        if not buckets[name]:
            continue
        ds = dataio.Dataset(
            samples=buckets[name],
            split=name,
            labeled_ids={s.sample_id for s in buckets[name] if s.seg_label is not None},
        )
        dataio.save_dataset(ds, out)
        written[name] = len(ds)
    _log_event(out, {"event": "preprocess", "raw_dir": str(raw_dir), "splits": written})
    print(f"wrote {sum(written.values())} slices across {len(written)} splits to {out}")
    return EXIT_OK


def _cmd_split(args) -> int:
    root, out = Path(args.data), Path(args.out)
    if root.resolve() == out.resolve():
        raise UsageError("--out must differ from --data; inputs are never modified in place")
    narrowed = dataio.load_dataset(root, args.split)
    narrowed = dataio.split_supervision(narrowed, args.n_labeled, args.seed)
    dataio.save_dataset(narrowed, out)
    for other in dataio.SPLIT_NAMES:
        if other != args.split and (root / other / "index.json").exists():
            dataio.save_dataset(dataio.load_dataset(root, other), out)
    _log_event(out, {
        "event": "split",
        "split": args.split,
        "n_labeled": args.n_labeled,
        "seed": args.seed,
        "labeled_ids": sorted(narrowed.labeled_ids),
    })
    print(f"kept seg supervision on {len(narrowed.labeled_ids)} of {len(narrowed)} samples")
    return EXIT_OK


def _cmd_train(args) -> int:
    doc = load_config_document(args.config, args.set or [])
    config = build_train_config(doc)
    out = Path(args.out)
    train_ds = dataio.load_dataset(args.data, args.train_split)
    val_ds = None
    if args.val_split and (Path(args.data) / args.val_split / "index.json").exists():
        val_ds = dataio.load_dataset(args.data, args.val_split)
    _write_snapshot(out, doc)
    _log_event(out, {"event": "train-start", "mode": config.mode, "n_labeled": config.n_labeled, "seed": config.seed})
    resume = args.resume and (out / "last.ckpt").exists() and config.mode != "sam_pp_two_stage"
    state, log = trainer.train(
        train_ds, config, out, val_dataset=val_ds,
        resume_from=(out / "last.ckpt") if resume else None,
    )
    final = log[-1] if log else {}
    _log_event(out, {"event": "train-done", "epochs": state.epoch, "final": final})
    print(f"trained {state.epoch} epochs; checkpoints in {out}")
    if final.get("val_dice") is not None:
        print(f"final val dice {final['val_dice']:.4f}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    model = trainer.load_model_state(args.checkpoint)
    ds = dataio.load_dataset(args.data, args.split)
    report = trainer.evaluate(model, ds, domain=args.domain, run_seed=args.run_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"eval_{args.split}_{args.domain}.json"
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    _log_event(out, {
        "event": "evaluate",
        "checkpoint": str(args.checkpoint),
        "split": args.split,
        "domain": args.domain,
        "mean_dice": metrics.json_float(report.mean_dice),
        "mean_hausdorff_px": metrics.json_float(report.mean_hausdorff),
    })
    print(f"dice {report.mean_dice:.4f} over {len(report.samples)} samples -> {path}")
    return EXIT_OK


def _find_sample(ds, sample_id: str):
    for s in ds.samples:
        if s.sample_id == sample_id:
            return s
    raise DatasetError(f"sample id {sample_id!r} not in split {ds.split!r}")


def _cmd_predict(args) -> int:
    model = trainer.load_model_state(args.checkpoint)
    ds = dataio.load_dataset(args.data, args.split)
    sample = _find_sample(ds, args.id)
    mask, diag = trainer.predict(sample.image, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask * 255, mode="L").save(out / f"{args.id}_mask.png")
    Image.fromarray((np.clip(diag["cam"], 0, 1) * 255).astype(np.uint8), mode="L").save(
        out / f"{args.id}_cam.png"
    )
    diag_json = {
        "id": args.id,
        "logits": [float(x) for x in diag["logits"]],
        "pred_class": diag["pred_class"],
        "boxes": [[b.x_min, b.y_min, b.x_max, b.y_max] for b in diag["boxes"]],
        "scores": [float(x) for x in diag["scores"]],
        "mask_pixels": int(mask.sum()),
    }
    (out / f"{args.id}_diagnostics.json").write_text(json.dumps(diag_json, indent=2, sort_keys=True))
    _log_event(out, {"event": "predict", "id": args.id, "pred_class": diag["pred_class"], "mask_pixels": int(mask.sum())})
    print(f"class {diag['pred_class']}, {len(diag['boxes'])} boxes, {int(mask.sum())} mask pixels -> {out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    reports = []
    for path in args.inputs:
        try:
            reports.append(EvalReport.from_dict(json.loads(Path(path).read_text())))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"cannot read eval report {path}: {exc}") from exc
    out = Path(args.out)
    paths = metrics.export_report(reports, out)
    agg = metrics.aggregate_runs(reports)
    _log_event(out, {"event": "report", "n_runs": agg.n_runs, "dice": agg.dice_summary()})
    print(f"dice {agg.dice_summary()}  boundary px {agg.hausdorff_summary()}  ({agg.n_runs} runs)")
    print(f"wrote {paths['csv']} and {paths['json']}")
    return EXIT_OK


def _cmd_overlay(args) -> int:
    model = trainer.load_model_state(args.checkpoint)
    ds = dataio.load_dataset(args.data, args.split)
    sample = _find_sample(ds, args.id)
    mask, _ = trainer.predict(sample.image, model)
    out_path = Path(args.out)
    metrics.render_overlay(sample.image, sample.seg_label, mask, out_path)
    print(f"wrote {out_path}")
    return EXIT_OK


def cell_name(mode: str, n_labeled: int) -> str:
    return f"{MODE_LABELS[mode]}-{n_labeled}"


def experiment_matrix(
    data_root: str | Path,
    out_root: str | Path,
    doc: dict,
    train_split: str = "train",
    val_split: str = "val",
    eval_split: str = "test",
) -> dict:
    """Run mode x n_labeled x seed cells sequentially and aggregate.

    Completed runs are skipped (checkpoint with all epochs done plus an eval
    report), so rerunning after an interruption only does the missing work.
    Per-cell failures are recorded and do not stop the rest of the matrix.
    """
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    matrix = doc.get("matrix", dict(DEFAULT_MATRIX))
    unknown = set(matrix) - {"modes", "n_labeled", "seeds"}
    if unknown:
        raise UsageError(f"unknown matrix keys {sorted(unknown)}")
    for mode in matrix["modes"]:
        if mode not in MODE_LABELS:
            raise UsageError(f"unknown mode {mode!r} in matrix")

    train_ds = dataio.load_dataset(data_root, train_split)
    val_ds = None
    if (Path(data_root) / val_split / "index.json").exists():
        val_ds = dataio.load_dataset(data_root, val_split)
    eval_ds = dataio.load_dataset(data_root, eval_split)

    _write_snapshot(out_root, doc)
    results: dict = {"cells": {}, "failures": []}
    for mode in matrix["modes"]:
        for n in matrix["n_labeled"]:
            cell = cell_name(mode, int(n))
            reports = []
            for seed in matrix["seeds"]:
                run_dir = out_root / "cells" / cell / f"seed{int(seed)}"
                try:
                    report = _run_matrix_cell(
                        train_ds, val_ds, eval_ds, doc, mode, int(n), int(seed), run_dir
                    )
                    reports.append(report)
                except (DatasetError, CheckpointError, TrainingDivergedError, ValueError, OSError) as exc:
                    results["failures"].append({"cell": cell, "seed": int(seed), "error": str(exc)})
                    _log_event(out_root, {"event": "cell-failed", "cell": cell, "seed": int(seed), "error": str(exc)})
            if reports:
                agg = metrics.aggregate_runs(reports)
                results["cells"][cell] = {
                    "mode": mode,
                    "n_labeled": int(n),
                    "n_runs": agg.n_runs,
                    "dice": agg.dice_summary(),
                    "hausdorff_px": agg.hausdorff_summary(),
                    "mean_dice": metrics.json_float(agg.mean_dice),
                    "std_dice": metrics.json_float(agg.std_dice),
                    "mean_hausdorff_px": metrics.json_float(agg.mean_hausdorff_px),
                    "std_hausdorff_px": metrics.json_float(agg.std_hausdorff_px),
                }
                metrics.export_report(reports, out_root / "cells" / cell / "report")

    (out_root / "matrix_report.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    lines = [
        f"{cell:<16} dice {c['dice']:<16} boundary px {c['hausdorff_px']}"
        for cell, c in sorted(results["cells"].items())
    ]
    (out_root / "table.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
    return results


def _run_matrix_cell(train_ds, val_ds, eval_ds, doc, mode, n_labeled, seed, run_dir: Path):
    eval_path = run_dir / "eval_test.json"
    trainer_doc = json.loads(json.dumps(doc["trainer"]))  # deep copy
    trainer_doc.update({"mode": mode, "n_labeled": n_labeled, "seed": seed})
    config = build_train_config({"trainer": trainer_doc})

    ckpt_path = run_dir / "last.ckpt"
    done_epochs = 0
    if ckpt_path.exists():
        try:
            done_epochs = int(load_checkpoint_meta(ckpt_path)["epoch"])
        except (CheckpointError, KeyError, TypeError):
            done_epochs = 0
    if done_epochs < config.epochs:
        if ckpt_path.exists() and mode != "sam_pp_two_stage":
            trainer.train(train_ds, config, run_dir, val_dataset=val_ds, resume_from=ckpt_path)
        else:
            if run_dir.exists():
                shutil.rmtree(run_dir)  # stale partial cell; outputs only, never inputs
            run_dir.mkdir(parents=True, exist_ok=True)
            trainer.train(train_ds, config, run_dir, val_dataset=val_ds)
    if eval_path.exists():
        return EvalReport.from_dict(json.loads(eval_path.read_text()))
    # final weights: the fixed-epoch protocol compares models after the full
    # run, so mid-run validation peaks do not skew the grid
    model = trainer.load_model_state(ckpt_path)
    report = trainer.evaluate(model, eval_ds, domain="in_domain", run_seed=seed)
    eval_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return report


def _cmd_matrix(args) -> int:
    doc = load_config_document(args.config, args.set or [])
    results = experiment_matrix(args.data, args.out, doc)
    for cell, c in sorted(results["cells"].items()):
        print(f"{cell:<16} dice {c['dice']}")
    if results["failures"]:
        print(f"{len(results['failures'])} run(s) failed; see matrix_report.json", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="sammix", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-volumes", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=PhantomConfig.image_size)
    p.add_argument("--raw-size", type=int, default=PhantomConfig.raw_size)
    p.add_argument("--no-raw", action="store_true", help="skip writing raw volumes")
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("preprocess", help="window, band-extract, and resize raw volumes")
    p.add_argument("--raw-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=float, default=400.0)
    p.add_argument("--center", type=float, default=40.0)
    p.add_argument("--fraction", type=float, default=0.3)
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("split", help="restrict seg supervision to a labeled budget")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--n-labeled", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON config document")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
    p.add_argument("--train-split", default="train")
    p.add_argument("--val-split", default="val")
    p.add_argument("--resume", action="store_true", help="continue from last.ckpt if present")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="run metrics for a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--domain", default="in_domain", choices=metrics.DOMAIN_TAGS)
    p.add_argument("--run-seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("predict", help="predict one sample and dump diagnostics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--id", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("report", help="aggregate eval reports into CSV/JSON summaries")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("overlay", help="render ground truth tint plus predicted contour")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--id", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_overlay)

    p = sub.add_parser("matrix", help="run the mode x budget x seed experiment grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=_cmd_matrix)

    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help and friends
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, TrainingDivergedError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())
