"""Command-line entry point: synth, curate, train, track, eval and study
subcommands covering the full pipeline. Exit code 0 on success; failures
print a single machine-parseable line "error: <kind>: <detail>" and exit with
a per-kind nonzero code."""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
from pathlib import Path

from . import config as cfg
from . import curation, evalbench, model_io, synth, tracker as tracker_mod, training
from .curation import BoundingBox, CuratedDataset, load_annotation
from .tracker import TrackerConfig

logger = logging.getLogger("siamfc")

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_CONFIG = 4
EXIT_RUNTIME = 5


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind = kind
        self.code = code


def _setup_logging():
    level = os.environ.get("SIAMFC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _out_dir(resolved, section) -> Path:
    out = resolved[section].get("out")
    if not out:
        raise CliError("config", f"{section}: missing required output directory (--out)",
                       EXIT_CONFIG)
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _annotation_paths(spec_list) -> list:
    """Expand annotation path specs: files, directories (searched recursively
    for annotation.json) and globs."""
    paths = []
    for spec in spec_list:
        p = Path(spec)
        if p.is_dir():
            paths.extend(sorted(p.rglob("annotation.json")))
        elif any(ch in spec for ch in "*?["):
            paths.extend(sorted(Path(m) for m in glob.glob(spec, recursive=True)))
        elif p.exists():
            paths.append(p)
        else:
            raise CliError("io", f"annotation path not found: {spec}", EXIT_IO)
    if not paths:
        raise CliError("io", f"no annotation files matched {spec_list}", EXIT_IO)
    return paths


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    overrides = {
        "run": {"seed": args.seed, "threads": args.threads},
        "synth": {
            "out": args.out,
            "sequences": args.sequences,
            "frames": args.frames,
            "clutter": args.clutter,
            "scale_drift": args.scale_drift,
        },
    }
    resolved = cfg.resolve(["run", "synth"], args.config, overrides)
    out = _out_dir(resolved, "synth")
    s = resolved["synth"]
    template = synth.SynthConfig(
        canvas=(s["canvas_h"], s["canvas_w"]),
        n_objects=s["objects"],
        clutter=s["clutter"],
        scale_drift=s["scale_drift"],
        frames=s["frames"],
    )
    paths = synth.gen_dataset(s["sequences"], template, resolved["run"]["seed"], out)
    cfg.write_snapshot(resolved, out / "synth_config.toml")
    print(f"synth: wrote {len(paths)} sequences under {out}")
    return 0


def cmd_curate(args) -> int:
    overrides = {
        "run": {"seed": args.seed, "threads": args.threads},
        "curate": {"out": args.out, "annotations": args.annotations},
    }
    resolved = cfg.resolve(["run", "curate"], args.config, overrides)
    out = _out_dir(resolved, "curate")
    spec_list = resolved["curate"].get("annotations")
    if not spec_list:
        raise CliError("config", "curate: no annotation inputs given", EXIT_CONFIG)
    annotations = [load_annotation(p) for p in _annotation_paths(spec_list)]
    spec = curation.CropSpec(
        exemplar_side=resolved["curate"]["exemplar_side"],
        search_side=resolved["curate"]["search_side"],
    )
    index = curation.curate(annotations, out, spec, threads=resolved["run"]["threads"])
    cfg.write_snapshot(resolved, out / "curate_config.toml")
    n = sum(1 for _ in open(index))
    print(f"curate: {n} curated frames indexed at {index}")
    return 0


def _train_config(resolved) -> training.TrainConfig:
    t = resolved["train"]
    return training.TrainConfig(
        epochs=t["epochs"],
        pairs_per_epoch=t["pairs_per_epoch"],
        batch=t["batch"],
        lr_start=t["lr_start"],
        lr_end=t["lr_end"],
        max_gap=t["max_gap"],
        radius=t["radius"],
        grayscale=t["grayscale_frac"],
        seed=resolved["run"]["seed"],
        preset=t["preset"],
        momentum=t["momentum"],
    )


def cmd_train(args) -> int:
    overrides = {
        "run": {"seed": args.seed, "threads": args.threads},
        "train": {
            "out": args.out,
            "data": args.data,
            "preset": args.preset,
            "epochs": args.epochs,
            "pairs_per_epoch": args.pairs_per_epoch,
            "grayscale_frac": args.grayscale_frac,
            "resume_from": args.resume_from,
        },
    }
    resolved = cfg.resolve(["run", "train"], args.config, overrides)
    out = _out_dir(resolved, "train")
    data = resolved["train"].get("data")
    if not data:
        raise CliError("config", "train: no curated data directory given (--data)", EXIT_CONFIG)
    dataset = CuratedDataset(data)
    cfg.write_snapshot(resolved, out / "train_config.toml")
    result = training.train(
        dataset, _train_config(resolved), out,
        resume_from=resolved["train"].get("resume_from"),
    )
    print(f"train: model at {result.model_path}, "
          f"final epoch loss {result.epoch_losses[-1]:.5f}")
    return 0


def _tracker_config(resolved) -> TrackerConfig:
    t = resolved["track"]
    return TrackerConfig(
        num_scales=t["scales"],
        scale_step=t["scale_step"],
        scale_damp=t["scale_damp"],
        window_weight=t["window_weight"],
        scale_penalty=t["scale_penalty"],
        upsample_to=t["upsample_to"],
    )


def _parse_init_box(text) -> BoundingBox:
    try:
        x, y, w, h = (float(v) for v in text.split(","))
    except ValueError:
        raise CliError("usage", f"--init-box expects x,y,w,h, got {text!r}", EXIT_USAGE) from None
    return BoundingBox.from_topleft(x, y, w, h)


def cmd_track(args) -> int:
    overrides = {
        "run": {"seed": args.seed, "threads": args.threads},
        "track": {
            "out": args.out,
            "model": args.model,
            "frames": args.frames,
            "init_box": args.init_box,
            "scales": args.scales,
            "overlays": args.overlays,
        },
    }
    resolved = cfg.resolve(["run", "track"], args.config, overrides)
    out = _out_dir(resolved, "track")
    t = resolved["track"]
    if not t.get("model"):
        raise CliError("config", "track: no model file given (--model)", EXIT_CONFIG)
    net, bias = model_io.load_model(t["model"])

    frames_spec = t.get("frames")
    if not frames_spec:
        raise CliError("config", "track: no frames given (--frames)", EXIT_CONFIG)
    frames_path = Path(frames_spec)
    if frames_path.is_file() and frames_path.suffix == ".json":
        seq = load_annotation(frames_path)
        frame_paths = [seq.image_file(f) for f in seq.frames]
        first_boxes = [b for b in seq.frames[0].objects.values() if b is not None]
        default_box = first_boxes[0] if first_boxes else None
    elif frames_path.is_dir():
        frame_paths = sorted(frames_path.glob("*.png"))
        default_box = None
    else:
        raise CliError("io", f"track: frames path not usable: {frames_spec}", EXIT_IO)
    if not frame_paths:
        raise CliError("io", f"track: no frames under {frames_spec}", EXIT_IO)

    if t.get("init_box"):
        init_box = _parse_init_box(t["init_box"])
    elif default_box is not None:
        init_box = default_box
    else:
        raise CliError("config", "track: no --init-box and no annotated first frame",
                       EXIT_CONFIG)

    cfg.write_snapshot(resolved, out / "track_config.toml")
    overlay_dir = out / "overlays" if t["overlays"] else None
    boxes, fps = tracker_mod.track_files(
        net, bias, frame_paths, init_box, _tracker_config(resolved), overlay_dir
    )
    pred_path = out / "predictions.jsonl"
    tracker_mod.write_predictions(boxes, pred_path)
    print(f"track: {len(boxes)} frames at {fps:.1f} fps -> {pred_path}")
    return 0


def cmd_eval(args) -> int:
    overrides = {
        "run": {"seed": args.seed, "threads": args.threads},
        "eval": {
            "out": args.out,
            "mode": args.mode,
            "predictions": args.predictions,
            "model": args.model,
            "ground_truth": args.ground_truth,
            "scales": args.scales,
        },
    }
    resolved = cfg.resolve(["run", "eval", "track"], args.config, overrides)
    out = _out_dir(resolved, "eval")
    e = resolved["eval"]
    gt_spec = e.get("ground_truth")
    if not gt_spec:
        raise CliError("config", "eval: no ground-truth annotations given", EXIT_CONFIG)
    sequences = [load_annotation(p) for p in _annotation_paths(gt_spec)]
    cfg.write_snapshot(resolved, out / "eval_config.toml")

    per_sequence = []
    curve = None
    if e["mode"] == "ope":
        if not e.get("predictions"):
            raise CliError("config", "eval --mode ope needs --predictions", EXIT_CONFIG)
        if len(sequences) != 1:
            raise CliError("config", "eval --mode ope compares one sequence at a time",
                           EXIT_CONFIG)
        seq = sequences[0]
        predictions = tracker_mod.read_predictions(e["predictions"])
        _, gt_boxes = evalbench.sequence_frames_and_boxes(seq)
        curve = evalbench.ope(predictions, gt_boxes)
        per_sequence.append({"video_id": seq.video_id, "auc": curve.auc})
    elif e["mode"] == "vot":
        if not e.get("model"):
            raise CliError("config", "eval --mode vot needs --model", EXIT_CONFIG)
        net, bias = model_io.load_model(e["model"])
        tcfg = _tracker_config_from_eval(resolved)
        for seq in sequences:
            frames, gt_boxes = evalbench.sequence_frames_and_boxes(seq)
            vr = evalbench.vot_run(net, bias, frames, gt_boxes, tcfg)
            per_sequence.append(
                {"video_id": seq.video_id, "accuracy": vr.accuracy, "failures": vr.failures}
            )
    else:
        raise CliError("config", f"eval: unknown mode {e['mode']!r}", EXIT_CONFIG)

    aggregate = evalbench.evaluate_sequences(per_sequence)
    report = evalbench.EvalReport(per_sequence=per_sequence, aggregate=aggregate, curve=curve)
    path = evalbench.write_report(report, out)
    print(f"eval: metrics at {path}: {json.dumps(aggregate, sort_keys=True)}")
    return 0


def _tracker_config_from_eval(resolved) -> TrackerConfig:
    merged = dict(resolved["track"])
    if resolved["eval"].get("scales"):
        merged["scales"] = resolved["eval"]["scales"]
    return TrackerConfig(
        num_scales=merged["scales"],
        scale_step=merged["scale_step"],
        scale_damp=merged["scale_damp"],
        window_weight=merged["window_weight"],
        scale_penalty=merged["scale_penalty"],
        upsample_to=merged["upsample_to"],
    )


def cmd_study(args) -> int:
    overrides = {
        "run": {"seed": args.seed, "threads": args.threads},
        "study": {
            "out": args.out,
            "data": args.data,
            "heldout": args.heldout,
            "fractions": [float(f) for f in args.fractions.split(",")] if args.fractions else None,
        },
        "train": {
            "preset": args.preset,
            "epochs": args.epochs,
            "pairs_per_epoch": args.pairs_per_epoch,
        },
    }
    resolved = cfg.resolve(["run", "study", "train", "track"], args.config, overrides)
    out = _out_dir(resolved, "study")
    s = resolved["study"]
    if not s.get("data"):
        raise CliError("config", "study: no curated data directory given (--data)", EXIT_CONFIG)
    if not s.get("heldout"):
        raise CliError("config", "study: no held-out annotations given (--heldout)", EXIT_CONFIG)
    dataset = CuratedDataset(s["data"])
    heldout = [load_annotation(p) for p in _annotation_paths(s["heldout"])]
    cfg.write_snapshot(resolved, out / "study_config.toml")
    rows = evalbench.dataset_size_study(
        dataset, heldout, s["fractions"], _train_config(resolved),
        _tracker_config(resolved), out,
    )
    table_path = out / "study.json"
    table_path.write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    for row in rows:
        print(f"study: fraction {row['fraction']:.2f} ({row['videos']} videos) "
              f"accuracy {row['accuracy']:.3f} failures {row['failures']}")
    print(f"study: table at {table_path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="TOML config file; flags override it")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads; 1 is the determinism mode")
    p.add_argument("--out", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="siamfc",
        description="Similarity-tracking pipeline: synthesize, curate, train, track, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic annotated video dataset")
    _add_common(p)
    p.add_argument("--sequences", type=int, default=None)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--clutter", type=int, default=None)
    p.add_argument("--scale-drift", dest="scale_drift", type=float, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("curate", help="extract exemplar/search crops from annotations")
    _add_common(p)
    p.add_argument("--annotations", nargs="+", default=None,
                   help="annotation files, directories or globs")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("train", help="train a similarity model on curated crops")
    _add_common(p)
    p.add_argument("--data", default=None, help="curated store directory")
    p.add_argument("--preset", choices=["paper", "tiny"], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--pairs-per-epoch", dest="pairs_per_epoch", type=int, default=None)
    p.add_argument("--grayscale-frac", dest="grayscale_frac", type=float, default=None)
    p.add_argument("--resume-from", dest="resume_from", default=None,
                   help="checkpoint stem to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run the tracker over a frame sequence")
    _add_common(p)
    p.add_argument("--model", default=None)
    p.add_argument("--frames", default=None,
                   help="frame directory or annotation.json")
    p.add_argument("--init-box", dest="init_box", default=None, help="x,y,w,h (top-left)")
    p.add_argument("--scales", type=int, choices=[3, 5], default=None)
    p.add_argument("--overlays", action="store_true", default=None,
                   help="write per-frame overlay PNGs")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score predictions or a live model against ground truth")
    _add_common(p)
    p.add_argument("--mode", choices=["ope", "vot"], default=None)
    p.add_argument("--predictions", default=None, help="predictions.jsonl (ope mode)")
    p.add_argument("--model", default=None, help="model file (vot mode)")
    p.add_argument("--ground-truth", dest="ground_truth", nargs="+", default=None)
    p.add_argument("--scales", type=int, choices=[3, 5], default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("study", help="dataset-size ablation: train per fraction, evaluate")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--heldout", nargs="+", default=None)
    p.add_argument("--fractions", default=None, help="comma-separated, e.g. 0.1,0.5,1.0")
    p.add_argument("--preset", choices=["paper", "tiny"], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--pairs-per-epoch", dest="pairs_per_epoch", type=int, default=None)
    p.set_defaults(func=cmd_study)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e.kind}: {e}", file=sys.stderr)
        return e.code
    except FileNotFoundError as e:
        print(f"error: io: {e}", file=sys.stderr)
        return EXIT_IO
    except model_io.ModelIOError as e:
        print(f"error: model: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, training.TrainingError) as e:
        print(f"error: runtime: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
