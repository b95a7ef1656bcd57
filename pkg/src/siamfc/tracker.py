"""Minimalist online tracker: the exemplar embedding is computed once from the
first frame, then every frame is scored by cross-correlating a scale pyramid
of search crops against it. Displacement comes from the argmax of the
bicubically upsampled, cosine-window-mixed score map; scale updates are
damped."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imgio, ops
from .curation import BoundingBox, crop_scale, extract_crop, exemplar_window_side
from .net import EmbeddingNet
from .ops import ScoreMap

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrackerConfig:
    num_scales: int = 5
    scale_step: float = 1.025
    scale_damp: float = 0.35
    window_weight: float = 0.176  # lambda mixed against the min-max-normalized map
    scale_penalty: float = 0.9745  # applied to non-central scales' maxima
    upsample_to: int = 272
    search_side: int = 255
    exemplar_side: int = 127

    def __post_init__(self):
        if self.num_scales not in (3, 5):
            raise ValueError(f"num_scales must be 3 or 5, got {self.num_scales}")
        if self.scale_step <= 1.0:
            raise ValueError(f"scale_step must be > 1, got {self.scale_step}")
        if not 0.0 <= self.window_weight < 1.0:
            raise ValueError(f"window_weight must be in [0, 1), got {self.window_weight}")
        if not 0.0 < self.scale_penalty <= 1.0:
            raise ValueError(f"scale_penalty must be in (0, 1], got {self.scale_penalty}")

    def scale_factors(self) -> np.ndarray:
        half = self.num_scales // 2
        return self.scale_step ** np.arange(-half, half + 1, dtype=np.float64)


@dataclass
class TrackerState:
    exemplar_features: np.ndarray  # immutable for the life of the track
    box: BoundingBox
    scale: float  # cumulative damped size multiplier relative to init
    config: TrackerConfig
    net: EmbeddingNet
    bias: float
    window: np.ndarray


def damped_scale_factor(chosen_step: float, damp: float) -> float:
    """Linear interpolation toward the chosen scale step: (1-damp) + damp*step."""
    return (1.0 - damp) + damp * chosen_step


def displacement_from_offset(
    offset_cells: float, total_stride: int, upsample_factor: float, scale: float
) -> float:
    """Argmax offset on the upsampled map -> image-pixel displacement:
    offset x (stride / upsample factor) / crop scale."""
    return offset_cells * total_stride / upsample_factor / scale


def init(
    net: EmbeddingNet, bias: float, frame: np.ndarray, box: BoundingBox,
    config: TrackerConfig = TrackerConfig(),
) -> TrackerState:
    """Embed the exemplar crop of the initial box once and fix it."""
    s = crop_scale(box, config.exemplar_side)
    zwin = exemplar_window_side(box)
    crop = extract_crop(frame, (box.cx, box.cy), zwin, config.exemplar_side)
    features = net.embed(imgio.to_tensor(crop), mode="infer")
    features.setflags(write=False)
    window = ops.cosine_window(config.upsample_to, config.upsample_to)
    logger.debug("init: box=%s crop_scale=%.4f features=%s", box, s, features.shape)
    return TrackerState(
        exemplar_features=features,
        box=BoundingBox(box.cx, box.cy, box.w, box.h),
        scale=1.0,
        config=config,
        net=net,
        bias=bias,
        window=window,
    )


def _argmax_center_tiebreak(response: np.ndarray) -> tuple[int, int]:
    """Argmax position; ties resolved by smallest displacement from the map
    centre, then row-major order."""
    peak = response.max()
    ties = np.argwhere(response == peak)
    if len(ties) == 1:
        return int(ties[0][0]), int(ties[0][1])
    ch = (response.shape[0] - 1) / 2.0
    cw = (response.shape[1] - 1) / 2.0
    d2 = (ties[:, 0] - ch) ** 2 + (ties[:, 1] - cw) ** 2
    best = ties[np.lexsort((ties[:, 1], ties[:, 0], d2))[0]]
    return int(best[0]), int(best[1])


def select_scale(maxima: np.ndarray, penalty: float) -> int:
    """Index of the winning scale: per-scale map maxima with non-central
    entries multiplied by ``penalty``; the central scale wins ties, then the
    smaller scale change."""
    maxima = np.asarray(maxima, dtype=np.float64)
    center = len(maxima) // 2
    penalized = maxima * penalty
    penalized[center] = maxima[center]
    order = sorted(range(len(maxima)), key=lambda i: (-penalized[i], abs(i - center), i))
    return order[0]


def localize(raw: ScoreMap, window: np.ndarray, window_weight: float, upsample_to: int):
    """Upsample a raw score map, mix the min-max-normalized result with the
    penalty window, and return the argmax displacement (dy, dx) in the crop's
    source pixels."""
    up = ops.bicubic_upsample(raw, upsample_to, upsample_to)
    vals = up.values.astype(np.float64)
    span = vals.max() - vals.min()
    normed = (vals - vals.min()) / span if span > 0 else np.zeros_like(vals)
    response = (1.0 - window_weight) * normed + window_weight * window
    iy, ix = _argmax_center_tiebreak(response)
    return up.cell_displacement(iy, ix)


def step(state: TrackerState, frame: np.ndarray):
    """Track one frame; returns (BoundingBox, state). The state is updated in
    place (box, scale); exemplar features are never touched."""
    cfg = state.config
    box = state.box
    s = crop_scale(box, cfg.exemplar_side)
    base_side = exemplar_window_side(box) * cfg.search_side / cfg.exemplar_side
    factors = cfg.scale_factors()
    crops = [
        extract_crop(frame, (box.cx, box.cy), base_side * f, cfg.search_side) for f in factors
    ]
    batch = imgio.stack_tensors(crops)
    search_feat = state.net.forward(batch, mode="infer")
    maps = ops.xcorr(state.exemplar_features, search_feat) + np.float32(state.bias)
    if not np.all(np.isfinite(maps)):
        raise FloatingPointError("non-finite tracking scores")

    best = select_scale(maps.max(axis=(1, 2, 3)), cfg.scale_penalty)
    chosen_step = float(factors[best])

    raw = ScoreMap(
        values=maps[best, 0],
        stride_y=float(state.net.total_stride),
        stride_x=float(state.net.total_stride),
    )
    dy, dx = localize(raw, state.window, cfg.window_weight, cfg.upsample_to)
    crop_scale_chosen = s / chosen_step  # the winning crop's own resampling factor
    state.box = BoundingBox(
        cx=box.cx + dx / crop_scale_chosen,
        cy=box.cy + dy / crop_scale_chosen,
        w=box.w,
        h=box.h,
    )
    factor = damped_scale_factor(chosen_step, cfg.scale_damp)
    state.scale *= factor
    state.box = state.box.scaled(factor)
    return BoundingBox(*_box_tuple(state.box)), state


def _box_tuple(box: BoundingBox):
    return (box.cx, box.cy, box.w, box.h)


def track(
    net: EmbeddingNet,
    bias: float,
    frames,
    init_box: BoundingBox,
    config: TrackerConfig = TrackerConfig(),
):
    """Track through an iterable of frames: init on the first, step on the
    rest; the exemplar is never recomputed. Returns one box per frame."""
    frames = iter(frames)
    try:
        first = next(frames)
    except StopIteration:
        raise ValueError("track needs at least one frame") from None
    state = init(net, bias, first, init_box, config)
    boxes = [BoundingBox(*_box_tuple(state.box))]
    for frame in frames:
        box, state = step(state, frame)
        boxes.append(box)
    return boxes


def write_predictions(boxes, path) -> None:
    """JSON lines {frame_index, x, y, w, h}, top-left convention."""
    with open(path, "w") as f:
        for i, box in enumerate(boxes):
            x, y, w, h = box.to_topleft()
            f.write(
                json.dumps(
                    {"frame_index": i, "x": x, "y": y, "w": w, "h": h}, sort_keys=True
                )
                + "\n"
            )


def read_predictions(path) -> list:
    boxes = []
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            boxes.append(BoundingBox.from_topleft(rec["x"], rec["y"], rec["w"], rec["h"]))
    return boxes


def draw_overlay(frame: np.ndarray, box: BoundingBox, color=(1.0, 0.1, 0.1)) -> np.ndarray:
    """Copy of the frame with the box outline burned in."""
    img = frame.copy()
    h, w = img.shape[:2]
    x0, y0, x1, y1 = (int(round(v)) for v in box.corners())
    x0, x1 = np.clip([x0, x1], 0, w - 1)
    y0, y1 = np.clip([y0, y1], 0, h - 1)
    img[y0 : y1 + 1, [x0, x1]] = color
    img[[y0, y1], x0 : x1 + 1] = color
    return img


def track_files(
    net, bias, frame_paths, init_box, config=TrackerConfig(), overlay_dir=None
):
    """File-based tracking driver used by the CLI; returns (boxes, fps)."""
    boxes = []
    state = None
    t0 = time.monotonic()
    for i, path in enumerate(frame_paths):
        frame = imgio.load_image(path)
        if i == 0:
            state = init(net, bias, frame, init_box, config)
            box = BoundingBox(*_box_tuple(state.box))
        else:
            box, state = step(state, frame)
        boxes.append(box)
        if overlay_dir is not None:
            overlay_dir = Path(overlay_dir)
            overlay_dir.mkdir(parents=True, exist_ok=True)
            imgio.save_image(overlay_dir / f"{i:06d}.png", draw_overlay(frame, box))
    elapsed = time.monotonic() - t0
    fps = len(boxes) / elapsed if elapsed > 0 else float("inf")
    return boxes, fps
