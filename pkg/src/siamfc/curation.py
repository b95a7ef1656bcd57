"""Offline dataset curation: scale-normalized, context-padded crop extraction
around annotated targets, plus training-pair sampling from the curated store.

Annotation input is JSON: {video_id, frames: [{index, image_path, objects:
[{object_id, x, y, w, h, present}]}]} with (x, y) the top-left corner. The
curated store holds one 127x127 exemplar crop and one 255x255 search crop per
annotated frame, indexed by a JSON-lines file.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imgio, ops

logger = logging.getLogger(__name__)


@dataclass
class BoundingBox:
    """Axis-aligned target region, centre + size, in image pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box dims must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_topleft(cls, x: float, y: float, w: float, h: float) -> "BoundingBox":
        return cls(cx=x + w / 2.0, cy=y + h / 2.0, w=w, h=h)

    def to_topleft(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)

    def corners(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1)."""
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    def scaled(self, factor: float) -> "BoundingBox":
        return BoundingBox(self.cx, self.cy, self.w * factor, self.h * factor)


@dataclass
class FrameAnnotation:
    index: int
    image_path: str
    objects: dict  # object_id -> BoundingBox | None (absent)


@dataclass
class SequenceAnnotation:
    video_id: str
    frames: list
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        indices = [f.index for f in self.frames]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError(f"{self.video_id}: frame indices not strictly increasing")

    def image_file(self, frame: FrameAnnotation) -> Path:
        p = Path(frame.image_path)
        return p if p.is_absolute() else self.root / p

    def load_frame(self, frame: FrameAnnotation) -> np.ndarray:
        return imgio.load_image(self.image_file(frame))

    def boxes_for(self, object_id: str) -> list:
        """(frame_index, BoundingBox) for frames where the object is present."""
        out = []
        for f in self.frames:
            box = f.objects.get(object_id)
            if box is not None:
                out.append((f.index, box))
        return out


def load_annotation(path) -> SequenceAnnotation:
    path = Path(path)
    data = json.loads(path.read_text())
    frames = []
    for fr in data["frames"]:
        objects = {}
        for obj in fr["objects"]:
            if obj.get("present", True):
                objects[str(obj["object_id"])] = BoundingBox.from_topleft(
                    obj["x"], obj["y"], obj["w"], obj["h"]
                )
            else:
                objects[str(obj["object_id"])] = None
        frames.append(
            FrameAnnotation(index=int(fr["index"]), image_path=fr["image_path"], objects=objects)
        )
    return SequenceAnnotation(video_id=str(data["video_id"]), frames=frames, root=path.parent)


def save_annotation(seq: SequenceAnnotation, path) -> None:
    frames = []
    for fr in seq.frames:
        objects = []
        for oid in sorted(fr.objects):
            box = fr.objects[oid]
            if box is None:
                objects.append({"object_id": oid, "present": False})
            else:
                x, y, w, h = box.to_topleft()
                objects.append(
                    {"object_id": oid, "x": x, "y": y, "w": w, "h": h, "present": True}
                )
        frames.append({"index": fr.index, "image_path": fr.image_path, "objects": objects})
    payload = {"video_id": seq.video_id, "frames": frames}
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


@dataclass(frozen=True)
class CropSpec:
    exemplar_side: int = 127
    search_side: int = 255

    def __post_init__(self):
        if self.exemplar_side >= self.search_side:
            raise ValueError("exemplar side must be smaller than search side")
        if self.exemplar_side % 2 == 0 or self.search_side % 2 == 0:
            raise ValueError("crop sides must be odd (centre-aligned)")


def context_margin(box: BoundingBox) -> float:
    """Context padding: half of the mean box dimension."""
    return (box.w + box.h) / 4.0


def exemplar_window_side(box: BoundingBox) -> float:
    """Side, in source pixels, of the square window that resamples to the
    exemplar crop: the geometric mean of the context-padded box sides."""
    p = context_margin(box)
    return math.sqrt((box.w + 2 * p) * (box.h + 2 * p))


def crop_scale(box: BoundingBox, exemplar_side: int = 127) -> float:
    """Resampling factor s with s^2 (w+2p)(h+2p) = exemplar_side^2."""
    return exemplar_side / exemplar_window_side(box)


def extract_crop(
    image: np.ndarray,
    center: tuple[float, float],
    crop_side_in_source: float,
    out_side: int,
    fill=None,
) -> np.ndarray:
    """Bilinearly resample a square source window (centre (cx, cy), side in
    source pixels) to out_side x out_side. Samples outside the image read the
    fill colour, by default the per-image mean RGB."""
    if out_side < 1:
        raise ValueError(f"out_side must be >= 1, got {out_side}")
    if crop_side_in_source <= 0:
        raise ValueError(f"crop side must be positive, got {crop_side_in_source}")
    image = np.asarray(image, dtype=ops.DTYPE)
    h, w = image.shape[:2]
    if fill is None:
        fill = image.reshape(-1, image.shape[2]).mean(axis=0)
    fill = np.asarray(fill, dtype=ops.DTYPE).reshape(1, 1, -1)

    cx, cy = center
    step = crop_side_in_source / out_side
    xs = cx - crop_side_in_source / 2.0 + (np.arange(out_side) + 0.5) * step - 0.5
    ys = cy - crop_side_in_source / 2.0 + (np.arange(out_side) + 0.5) * step - 0.5

    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0).astype(ops.DTYPE)[:, None, None]
    fx = (xs - x0).astype(ops.DTYPE)[None, :, None]

    def gather(yi, xi):
        valid = ((yi >= 0) & (yi < h))[:, None, None] & ((xi >= 0) & (xi < w))[None, :, None]
        vals = image[np.clip(yi, 0, h - 1)][:, np.clip(xi, 0, w - 1)]
        return np.where(valid, vals, fill)

    v00 = gather(y0, x0)
    v01 = gather(y0, x0 + 1)
    v10 = gather(y0 + 1, x0)
    v11 = gather(y0 + 1, x0 + 1)
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return (top * (1 - fy) + bot * fy).astype(ops.DTYPE)


def crop_pair_for_box(image: np.ndarray, box: BoundingBox, spec: CropSpec = CropSpec()):
    """The (exemplar, search) crop pair for one annotated box: same centre,
    same scale, search window side = (search/exemplar) x exemplar window side."""
    zwin = exemplar_window_side(box)
    xwin = zwin * spec.search_side / spec.exemplar_side
    center = (box.cx, box.cy)
    z = extract_crop(image, center, zwin, spec.exemplar_side)
    x = extract_crop(image, center, xwin, spec.search_side)
    return z, x


def curate(annotations, out_dir, spec: CropSpec = CropSpec(), threads: int = 1) -> Path:
    """Extract exemplar/search crops for every annotated frame of every
    sequence into out_dir; returns the path of the JSON-lines index. Frames
    with absent boxes are skipped and logged."""
    out_dir = Path(out_dir)
    (out_dir / "crops").mkdir(parents=True, exist_ok=True)

    jobs = []
    for seq in annotations:
        for frame in seq.frames:
            jobs.append((seq, frame))

    def process(job):
        seq, frame = job
        records = []
        present = {oid: box for oid, box in frame.objects.items() if box is not None}
        if not present:
            logger.info("skipping %s frame %d: no object present", seq.video_id, frame.index)
            return records
        image = seq.load_frame(frame)
        for oid in sorted(present):
            box = present[oid]
            z, x = crop_pair_for_box(image, box, spec)
            rel_dir = Path("crops") / seq.video_id / oid
            (out_dir / rel_dir).mkdir(parents=True, exist_ok=True)
            z_rel = rel_dir / f"{frame.index:06d}.z.png"
            x_rel = rel_dir / f"{frame.index:06d}.x.png"
            imgio.save_image(out_dir / z_rel, z)
            imgio.save_image(out_dir / x_rel, x)
            records.append(
                {
                    "video_id": seq.video_id,
                    "object_id": oid,
                    "frame_index": frame.index,
                    "exemplar": z_rel.as_posix(),
                    "search": x_rel.as_posix(),
                    "scale": crop_scale(box, spec.exemplar_side),
                }
            )
        return records

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_job = list(pool.map(process, jobs))
    else:
        per_job = [process(job) for job in jobs]

    index_path = out_dir / "index.jsonl"
    with open(index_path, "w") as f:
        for records in per_job:
            for rec in records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    return index_path


class CuratedDataset:
    """In-memory view of a curated store: tracks keyed by (video, object),
    each an ordered list of index records. Decoded crops are cached."""

    def __init__(self, root):
        self.root = Path(root)
        index_path = self.root / "index.jsonl"
        if not index_path.exists():
            raise FileNotFoundError(f"no curated index at {index_path}")
        self.tracks: dict = {}
        with open(index_path) as f:
            for line in f:
                rec = json.loads(line)
                key = (rec["video_id"], rec["object_id"])
                self.tracks.setdefault(key, []).append(rec)
        for records in self.tracks.values():
            records.sort(key=lambda r: r["frame_index"])
        self.videos = sorted({v for v, _ in self.tracks})
        self._cache: dict = {}

    def __len__(self) -> int:
        return sum(len(records) for records in self.tracks.values())

    def objects_in(self, video_id: str) -> list:
        return sorted(o for v, o in self.tracks if v == video_id)

    def load_crop(self, rel_path: str) -> np.ndarray:
        cached = self._cache.get(rel_path)
        if cached is None:
            cached = (imgio.load_image(self.root / rel_path) * 255.0 + 0.5).astype(np.uint8)
            self._cache[rel_path] = cached
        return cached.astype(ops.DTYPE) / 255.0

    def subset(self, video_ids) -> "CuratedDataset":
        """Shallow view restricted to the given videos."""
        keep = set(video_ids)
        view = object.__new__(CuratedDataset)
        view.root = self.root
        view.tracks = {k: v for k, v in self.tracks.items() if k[0] in keep}
        view.videos = sorted({v for v, _ in view.tracks})
        view._cache = self._cache
        return view


def sample_pair(
    dataset: CuratedDataset,
    max_gap: int,
    rng: np.random.Generator,
    grayscale_prob: float = 0.0,
):
    """Draw one training pair: two distinct frames of one object at most
    max_gap frame indices apart.

    Sampling is hierarchical: video, then object, then frame gap uniform over
    the achievable gaps in {1..max_gap}, then position. With probability
    grayscale_prob the pair is converted to grayscale. Returns
    (exemplar image, search image, metadata).
    """
    if max_gap < 1:
        raise ValueError(f"max_gap must be >= 1, got {max_gap}")
    if not dataset.videos:
        raise ValueError("cannot sample from an empty curated dataset")

    for _ in range(1000):
        video = dataset.videos[rng.integers(len(dataset.videos))]
        objects = dataset.objects_in(video)
        oid = objects[rng.integers(len(objects))]
        records = dataset.tracks[(video, oid)]
        if len(records) < 2:
            continue
        indices = np.array([r["frame_index"] for r in records])
        diff = indices[None, :] - indices[:, None]
        achievable = np.unique(diff[(diff >= 1) & (diff <= max_gap)])
        if achievable.size == 0:
            continue
        gap = int(achievable[rng.integers(achievable.size)])
        starts = np.nonzero(np.isin(indices + gap, indices))[0]
        a = int(starts[rng.integers(starts.size)])
        b = int(np.searchsorted(indices, indices[a] + gap))
        if rng.random() < 0.5:
            a, b = b, a
        z_img = dataset.load_crop(records[a]["exemplar"])
        x_img = dataset.load_crop(records[b]["search"])
        if grayscale_prob > 0 and rng.random() < grayscale_prob:
            z_img = imgio.to_grayscale(z_img)
            x_img = imgio.to_grayscale(x_img)
        meta = {
            "video_id": video,
            "object_id": oid,
            "exemplar_frame": int(indices[a]),
            "search_frame": int(indices[b]),
        }
        return z_img, x_img, meta
    raise ValueError("no object with two frames within the gap limit")
