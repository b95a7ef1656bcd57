"""Quantitative evaluation: IoU, one-pass-evaluation success curves with AUC,
and the accuracy/robustness protocol with re-initialization five frames after
each failure. The protocol engine is driven through a small tracker-driver
interface so scripted predictions can exercise it directly."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tracker as tracker_mod
from .curation import BoundingBox
from .tracker import TrackerConfig

logger = logging.getLogger(__name__)

#: Default OPE threshold grid: 0 to 1 in steps of 0.05.
DEFAULT_THRESHOLDS = tuple(np.round(np.arange(0, 21) * 0.05, 2))

#: Frames consumed by a failure before tracking resumes: the failure frame
#: itself is evaluated; the next four are skipped; re-initialization happens
#: on the fifth.
REINIT_GAP = 5


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection area over union area, in [0, 1]."""
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union


@dataclass
class SuccessCurve:
    thresholds: list
    success_rates: list
    auc: float


def ope(predictions, ground_truth, thresholds=DEFAULT_THRESHOLDS) -> SuccessCurve:
    """One-pass evaluation: success rate at threshold t is the fraction of
    frames with IoU strictly above t; AUC is the mean rate over the grid."""
    if len(predictions) != len(ground_truth):
        raise ValueError(
            f"{len(predictions)} predictions vs {len(ground_truth)} ground-truth boxes"
        )
    ious = np.array([iou(p, g) for p, g in zip(predictions, ground_truth)])
    rates = [float(np.mean(ious > t)) for t in thresholds]
    return SuccessCurve(
        thresholds=list(thresholds), success_rates=rates, auc=float(np.mean(rates))
    )


@dataclass
class VotResult:
    accuracy: float  # mean IoU over evaluated frames
    failures: int
    iou_trace: list  # per frame: float IoU, or None where not evaluated

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")


def run_protocol(driver, ground_truth) -> VotResult:
    """Accuracy/robustness protocol over a fully annotated sequence.

    ``driver`` exposes init(frame_index, box) and step(frame_index) -> box.
    Tracking starts from ground truth on frame 0. A frame whose IoU against
    ground truth is zero counts as a failure; the following frames up to and
    including the re-initialization frame (failure + REINIT_GAP) are excluded
    from accuracy, and the tracker restarts there from ground truth.
    """
    n = len(ground_truth)
    if n < 1:
        raise ValueError("protocol needs at least one annotated frame")
    trace: list = [None] * n
    failures = 0
    driver.init(0, ground_truth[0])
    i = 1
    while i < n:
        box = driver.step(i)
        v = iou(box, ground_truth[i])
        trace[i] = v
        if v == 0.0:
            failures += 1
            reinit = i + REINIT_GAP
            if reinit >= n:
                break
            driver.init(reinit, ground_truth[reinit])
            i = reinit + 1
        else:
            i += 1
    evaluated = [v for v in trace if v is not None]
    accuracy = float(np.mean(evaluated)) if evaluated else 0.0
    return VotResult(accuracy=accuracy, failures=failures, iou_trace=trace)


class _ModelDriver:
    """Protocol driver that runs the real tracker over in-memory frames."""

    def __init__(self, net, bias, frames, config: TrackerConfig):
        self.net = net
        self.bias = bias
        self.frames = frames
        self.config = config
        self.state = None

    def init(self, frame_index: int, box: BoundingBox):
        self.state = tracker_mod.init(
            self.net, self.bias, self.frames[frame_index], box, self.config
        )

    def step(self, frame_index: int) -> BoundingBox:
        box, self.state = tracker_mod.step(self.state, self.frames[frame_index])
        return box


class ScriptedDriver:
    """Protocol driver that replays a fixed box per frame; for protocol tests.
    Records every init it receives."""

    def __init__(self, boxes):
        self.boxes = boxes
        self.inits: list = []

    def init(self, frame_index: int, box: BoundingBox):
        self.inits.append(frame_index)

    def step(self, frame_index: int) -> BoundingBox:
        return self.boxes[frame_index]


def vot_run(net, bias, frames, ground_truth, config: TrackerConfig = TrackerConfig()) -> VotResult:
    """Run the re-initialization protocol with a live model."""
    if len(frames) != len(ground_truth):
        raise ValueError("protocol needs ground truth on every frame")
    return run_protocol(_ModelDriver(net, bias, frames, config), ground_truth)


def sequence_frames_and_boxes(seq, object_id=None):
    """Load a fully annotated sequence's frames and boxes for one object."""
    oids = sorted({oid for f in seq.frames for oid in f.objects})
    oid = object_id or oids[0]
    frames = []
    boxes = []
    for f in seq.frames:
        box = f.objects.get(oid)
        if box is None:
            raise ValueError(f"{seq.video_id}: object {oid} absent on frame {f.index}")
        frames.append(seq.load_frame(f))
        boxes.append(box)
    return frames, boxes


@dataclass
class EvalReport:
    per_sequence: list
    aggregate: dict
    curve: SuccessCurve | None = None


def evaluate_sequences(results: list) -> dict:
    """Order-independent aggregate of per-sequence metric dicts."""
    results = sorted(results, key=lambda r: r["video_id"])
    agg: dict = {}
    if any("auc" in r for r in results):
        agg["auc"] = float(np.mean([r["auc"] for r in results]))
    if any("accuracy" in r for r in results):
        agg["accuracy"] = float(np.mean([r["accuracy"] for r in results]))
        agg["failures"] = int(np.sum([r["failures"] for r in results]))
    return agg


def write_report(report: EvalReport, out_dir, stem: str = "metrics") -> Path:
    """JSON metrics plus a CSV of the success curve for plotting."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{stem}.json"
    payload = {"per_sequence": report.per_sequence, "aggregate": report.aggregate}
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    if report.curve is not None:
        with open(out_dir / f"{stem}_curve.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["threshold", "success_rate"])
            for t, r in zip(report.curve.thresholds, report.curve.success_rates):
                writer.writerow([t, r])
    return path


def subsample_videos(video_ids, fraction: float, seed: int) -> list:
    """Deterministic video subset: shuffle the sorted ids with the seed and
    keep the first ceil(fraction * n)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    ids = sorted(video_ids)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ids))
    keep = max(1, int(np.ceil(fraction * len(ids))))
    return sorted(ids[i] for i in perm[:keep])


def dataset_size_study(
    dataset,
    heldout_sequences,
    fractions,
    train_config,
    tracker_config: TrackerConfig,
    work_dir,
) -> list:
    """Train one model per dataset fraction (videos subsampled
    deterministically) and evaluate each with the re-initialization protocol
    on held-out sequences. Returns rows of
    {fraction, videos, accuracy, failures}."""
    from .training import train  # local import: training pulls in curation

    work_dir = Path(work_dir)
    rows = []
    for fraction in fractions:
        videos = subsample_videos(dataset.videos, fraction, train_config.seed)
        subset = dataset.subset(videos)
        out_dir = work_dir / f"fraction_{int(round(fraction * 100)):03d}"
        result = train(subset, train_config, out_dir)
        from .model_io import load_model

        net, bias = load_model(result.model_path)
        per_seq = []
        for seq in heldout_sequences:
            frames, boxes = sequence_frames_and_boxes(seq)
            vr = vot_run(net, bias, frames, boxes, tracker_config)
            per_seq.append(
                {"video_id": seq.video_id, "accuracy": vr.accuracy, "failures": vr.failures}
            )
        agg = evaluate_sequences(per_seq)
        rows.append(
            {
                "fraction": fraction,
                "videos": len(videos),
                "accuracy": agg["accuracy"],
                "failures": agg["failures"],
            }
        )
        logger.info(
            "fraction %.0f%%: %d videos, accuracy %.3f, failures %d",
            fraction * 100, len(videos), agg["accuracy"], agg["failures"],
        )
    return rows
