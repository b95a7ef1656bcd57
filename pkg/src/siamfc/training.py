"""Score-map logistic training: radial label maps with class balancing,
stable logistic loss, geometric learning-rate annealing, plain SGD through
both Siamese branches, and a deterministic epoch loop with checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import imgio, model_io, ops
from .curation import CuratedDataset, sample_pair
from .net import EmbeddingNet, build_net, init_params
from .ops import ScoreMap

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class LabelMap:
    """+1/-1 grid with class-balanced weights: a cell is positive iff its
    centre offset, scaled by the network stride, lies within ``radius``."""

    labels: np.ndarray  # 2-d, values in {+1, -1}
    weights: np.ndarray  # 2-d, non-negative, sums to 1
    stride: int
    radius: float
    center: tuple

    @property
    def shape(self):
        return self.labels.shape


def make_label_map(map_h: int, map_w: int, stride: int, radius: float) -> LabelMap:
    """Radial labels on a (map_h, map_w) grid with the centre cell at
    (floor(h/2), floor(w/2)); each class carries total weight 1/2 (all weight
    moves to the other class if one is empty)."""
    cy, cx = map_h // 2, map_w // 2
    ys = np.arange(map_h)[:, None] - cy
    xs = np.arange(map_w)[None, :] - cx
    dist = stride * np.hypot(ys, xs)
    labels = np.where(dist <= radius, 1, -1).astype(np.int8)

    n_pos = int((labels > 0).sum())
    n_neg = labels.size - n_pos
    weights = np.zeros((map_h, map_w), dtype=np.float64)
    if n_pos and n_neg:
        weights[labels > 0] = 0.5 / n_pos
        weights[labels < 0] = 0.5 / n_neg
    else:  # degenerate single-class map: uniform weights
        weights[:] = 1.0 / labels.size
    return LabelMap(labels=labels, weights=weights, stride=stride, radius=radius, center=(cy, cx))


def logistic_loss(v: float, y: int) -> float:
    """log(1 + exp(-y*v)) via the overflow-free branch."""
    m = -float(y) * float(v)
    if m > 0:
        return m + math.log1p(math.exp(-m))
    return math.log1p(math.exp(m))


def _logistic_grid(v: np.ndarray, y: np.ndarray) -> np.ndarray:
    m = -y.astype(np.float64) * v.astype(np.float64)
    return np.maximum(m, 0.0) + np.log1p(np.exp(-np.abs(m)))


def _sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    et = np.exp(t[~pos])
    out[~pos] = et / (1.0 + et)
    return out


def _scores_grid(scores) -> np.ndarray:
    return scores.values if isinstance(scores, ScoreMap) else np.asarray(scores)


def map_loss(scores, labels: LabelMap) -> float:
    """Weighted sum of per-cell logistic losses; reduces to the plain mean
    under uniform weights."""
    v = _scores_grid(scores)
    if v.shape != labels.shape:
        raise ValueError(f"score map {v.shape} vs label map {labels.shape}")
    return float(np.sum(labels.weights * _logistic_grid(v, labels.labels)))


def map_loss_grad(scores, labels: LabelMap):
    """(loss, d loss / d scores)."""
    v = _scores_grid(scores)
    if v.shape != labels.shape:
        raise ValueError(f"score map {v.shape} vs label map {labels.shape}")
    y = labels.labels.astype(np.float64)
    loss = float(np.sum(labels.weights * _logistic_grid(v, labels.labels)))
    grad = labels.weights * (-y) * _sigmoid(-y * v.astype(np.float64))
    return loss, grad.astype(ops.DTYPE)


@dataclass
class TrainConfig:
    epochs: int = 50
    pairs_per_epoch: int = 50000
    batch: int = 8
    lr_start: float = 1e-2
    lr_end: float = 1e-5
    max_gap: int = 100  # pair frames at most this many indices apart
    radius: float = 16.0  # positive-label radius, image pixels
    grayscale: float = 0.0  # fraction of pairs converted to grayscale
    seed: int = 0
    preset: str = "paper"
    momentum: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (self.lr_start >= self.lr_end > 0):
            raise ValueError("need lr_start >= lr_end > 0")
        if self.batch < 1 or self.pairs_per_epoch < 1:
            raise ValueError("batch and pairs_per_epoch must be >= 1")


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Geometric annealing from lr_start (epoch 0) to lr_end (last epoch)."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    if config.epochs == 1:
        return config.lr_start
    ratio = config.lr_end / config.lr_start
    return config.lr_start * ratio ** (epoch / (config.epochs - 1))


def sgd_step(
    net: EmbeddingNet,
    bias: float,
    batch: list,
    lr: float,
    momentum: float = 0.0,
    buffers: dict | None = None,
):
    """One SGD update on the mean score-map loss of a batch of
    (exemplar tensor, search tensor, LabelMap) triples. Parameters of the two
    Siamese branches are shared, so both branches' gradients accumulate; the
    score bias b is learned jointly. Returns (new bias, batch loss)."""
    if not batch:
        raise ValueError("sgd_step needs a non-empty batch")
    n = len(batch)
    z = np.concatenate([item[0] for item in batch], axis=0)
    x = np.concatenate([item[1] for item in batch], axis=0)

    z_feat, z_tape = net.forward(z, mode="train", record=True)
    x_feat, x_tape = net.forward(x, mode="train", record=True)
    v = ops.xcorr(z_feat, x_feat) + np.float32(bias)

    losses = []
    dv = np.empty_like(v)
    for i, (_, _, labels) in enumerate(batch):
        loss_i, grad_i = map_loss_grad(v[i, 0], labels)
        losses.append(loss_i)
        dv[i, 0] = grad_i / n
    batch_loss = float(np.mean(losses))
    if not math.isfinite(batch_loss):
        raise TrainingError(f"non-finite batch loss {batch_loss}; scores in "
                            f"[{v.min():.3g}, {v.max():.3g}]")

    grads: dict = {}
    gz, gx = ops.xcorr_backward(z_feat, x_feat, dv)
    net.backward(x_tape, gx, grads)
    net.backward(z_tape, gz, grads)
    grads["score_bias"] = np.array([dv.sum()], dtype=ops.DTYPE)

    params = dict(net.param_items())
    params["score_bias"] = np.array([bias], dtype=ops.DTYPE)
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            continue
        if momentum > 0.0:
            buf = buffers.setdefault(key, np.zeros_like(p))
            buf *= np.float32(momentum)
            buf += g
            g = buf
        p -= np.float32(lr) * g
    return float(params["score_bias"][0]), batch_loss


def _pair_tensors(dataset, config: TrainConfig, rng):
    z_img, x_img, _ = sample_pair(dataset, config.max_gap, rng, config.grayscale)
    return imgio.to_tensor(z_img), imgio.to_tensor(x_img)


@dataclass
class TrainResult:
    model_path: Path
    log_path: Path
    epoch_losses: list = field(default_factory=list)


def train(
    dataset: CuratedDataset,
    config: TrainConfig,
    out_dir,
    net: EmbeddingNet | None = None,
    resume_from=None,
) -> TrainResult:
    """Run the epoch loop: per epoch, pairs_per_epoch fresh pairs in batches,
    one checkpoint, one JSON log line {epoch, mean_loss, lr, wall_ms}. Fully
    deterministic for a fixed seed (single thread). ``resume_from`` names a
    checkpoint stem written by a previous run with the same config."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"

    if resume_from is not None:
        net, bias, start_epoch, rng, buffers = _load_checkpoint(resume_from)
        log_mode = "a"
    else:
        if net is None:
            net = init_params(build_net(config.preset), config.seed)
        bias = 0.0
        start_epoch = 0
        rng = np.random.default_rng(config.seed)
        buffers: dict = {}
        log_mode = "w"

    label_cache: dict = {}
    epoch_losses = []
    final_model = out_dir / "model.sfcm"
    with open(log_path, log_mode) as log_f:
        for epoch in range(start_epoch, config.epochs):
            lr = lr_at(epoch, config)
            t0 = time.monotonic()
            remaining = config.pairs_per_epoch
            total_loss = 0.0
            while remaining > 0:
                take = min(config.batch, remaining)
                batch = []
                for _ in range(take):
                    zt, xt = _pair_tensors(dataset, config, rng)
                    labels = _labels_for(net, zt, xt, config, label_cache)
                    batch.append((zt, xt, labels))
                bias, loss = sgd_step(net, bias, batch, lr, config.momentum, buffers)
                total_loss += loss * take
                remaining -= take
            mean_loss = total_loss / config.pairs_per_epoch
            epoch_losses.append(mean_loss)
            wall_ms = int((time.monotonic() - t0) * 1000)
            log_f.write(
                json.dumps(
                    {"epoch": epoch, "mean_loss": mean_loss, "lr": lr, "wall_ms": wall_ms}
                )
                + "\n"
            )
            log_f.flush()
            logger.info("epoch %d: mean loss %.5f (lr %.2e, %d ms)", epoch, mean_loss, lr, wall_ms)
            _save_checkpoint(out_dir / f"checkpoint_{epoch:04d}", net, bias, epoch, rng,
                             buffers, config)
    model_io.save_model(net, bias, final_model)
    return TrainResult(model_path=final_model, log_path=log_path, epoch_losses=epoch_losses)


def _labels_for(net, zt, xt, config, cache):
    key = (zt.shape[2:], xt.shape[2:])
    labels = cache.get(key)
    if labels is None:
        zh, zw = net.infer_shapes(*zt.shape[2:])[-1][2:]
        xh, xw = net.infer_shapes(*xt.shape[2:])[-1][2:]
        labels = make_label_map(xh - zh + 1, xw - zw + 1, net.total_stride, config.radius)
        cache[key] = labels
    return labels


def _save_checkpoint(stem: Path, net, bias, epoch, rng, buffers, config) -> None:
    model_io.save_model(net, bias, stem.with_suffix(".sfcm"))
    sidecar = {
        "epoch": epoch,
        "rng_state": rng.bit_generator.state,
        "momentum": config.momentum,
        "config": asdict(config),
    }
    stem.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")
    if buffers:
        model_io.write_blob(
            stem.with_suffix(".opt"), model_io.OPT_MAGIC, {"epoch": epoch},
            sorted(buffers.items()),
        )


def _load_checkpoint(stem):
    stem = Path(stem)
    net, bias = model_io.load_model(stem.with_suffix(".sfcm"))
    sidecar = json.loads(stem.with_suffix(".json").read_text())
    rng = np.random.default_rng()
    rng.bit_generator.state = sidecar["rng_state"]
    buffers = {}
    opt_path = stem.with_suffix(".opt")
    if opt_path.exists():
        _, buffers = model_io.read_blob(opt_path, model_io.OPT_MAGIC)
    return net, bias, sidecar["epoch"] + 1, rng, buffers
