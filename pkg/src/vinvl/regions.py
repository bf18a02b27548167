"""Box geometry, NMS and position-augmented region features."""
from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

POSITION_DIM = 6
DEFAULT_APPEARANCE_DIM = 2048
DEFAULT_MAX_REGIONS = 50
DEFAULT_IOU_THRESHOLD = 0.5


class InvalidBoxError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    """Corner-format box in pixels."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBoxError(f"non-finite box {coords}")
        if min(coords) < 0:
            raise InvalidBoxError(f"negative coordinate in {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise InvalidBoxError(f"degenerate box {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class ScoredDetection:
    box: BoundingBox
    class_id: int
    score: float
    appearance: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass
class RegionFeature:
    """Appearance vector plus the 6-d position encoding of one region."""

    appearance: np.ndarray
    position: np.ndarray

    def __post_init__(self):
        self.appearance = np.asarray(self.appearance, dtype=np.float64)
        self.position = np.asarray(self.position, dtype=np.float64)
        if self.position.shape != (POSITION_DIM,):
            raise ValueError(f"position must have {POSITION_DIM} entries, got {self.position.shape}")

    def concat(self) -> np.ndarray:
        return np.concatenate([self.appearance, self.position])


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _greedy_keep(dets: Sequence[ScoredDetection], iou_threshold: float) -> list[int]:
    """Indices kept by greedy suppression, in score-descending (then input) order."""
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    boxes = np.array([dets[i].box.as_tuple() for i in order], dtype=np.float64)
    x1, y1, x2, y2 = boxes.T
    area = (x2 - x1) * (y2 - y1)
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for r in range(len(order)):
        if not alive[r]:
            continue
        keep.append(order[r])
        rest = slice(r + 1, None)
        iw = np.clip(np.minimum(x2[r], x2[rest]) - np.maximum(x1[r], x1[rest]), 0, None)
        ih = np.clip(np.minimum(y2[r], y2[rest]) - np.maximum(y1[r], y1[rest]), 0, None)
        inter = iw * ih
        alive[rest] &= inter / (area[r] + area[rest] - inter) <= iou_threshold
    return keep


def _check_threshold(iou_threshold: float) -> None:
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")


def nms_class_agnostic(dets: Sequence[ScoredDetection],
                       iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> list[ScoredDetection]:
    """One greedy suppression pass over all detections, ignoring their classes."""
    _check_threshold(iou_threshold)
    return [dets[i] for i in _greedy_keep(dets, iou_threshold)]


def _partition(dets: Sequence[ScoredDetection]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, d in enumerate(dets):
        groups.setdefault(d.class_id, []).append(i)
    return groups


def nms_class_aware(dets: Sequence[ScoredDetection],
                    iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> list[ScoredDetection]:
    """Independent greedy suppression inside every class partition."""
    _check_threshold(iou_threshold)
    kept: list[int] = []
    for idx in _partition(dets).values():
        sub = [dets[i] for i in idx]
        kept.extend(idx[j] for j in _greedy_keep(sub, iou_threshold))
    kept.sort(key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in kept]


def select_regions(dets: Sequence[ScoredDetection],
                   max_regions: int = DEFAULT_MAX_REGIONS) -> list[ScoredDetection]:
    if max_regions < 1:
        raise ValueError("max_regions must be >= 1")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in order[:max_regions]]


def position_encode(box: BoundingBox, image_w: float, image_h: float,
                    normalize: bool = True) -> np.ndarray:
    """``(x1, y1, x2, y2, w, h)``, divided by the image size unless ``normalize`` is off."""
    if image_w <= 0 or image_h <= 0:
        raise ValueError("image dimensions must be positive")
    sx, sy = (image_w, image_h) if normalize else (1.0, 1.0)
    return np.array([box.x1 / sx, box.y1 / sy, box.x2 / sx, box.y2 / sy,
                     box.width / sx, box.height / sy], dtype=np.float64)


def extract_region_features(dets: Sequence[ScoredDetection], image_w: float, image_h: float,
                            iou_threshold: float = DEFAULT_IOU_THRESHOLD,
                            max_regions: int = DEFAULT_MAX_REGIONS, score_floor: float = 0.0,
                            normalize: bool = True) -> tuple[list[ScoredDetection], list[RegionFeature]]:
    """Score floor, class-agnostic NMS, top-K, then ``(appearance, position)`` pairs."""
    kept = [d for d in dets if d.score >= score_floor]
    kept = select_regions(nms_class_agnostic(kept, iou_threshold), max_regions)
    feats = []
    for d in kept:
        if d.appearance is None:
            raise ValueError("detection has no appearance vector")
        feats.append(RegionFeature(d.appearance, position_encode(d.box, image_w, image_h, normalize)))
    return kept, feats


# ----------------------------------------------------------------------------
# benchmark
# ----------------------------------------------------------------------------

@dataclass
class NmsBenchReport:
    n_boxes: int
    n_classes: int
    trials: int
    agnostic_invocations: int
    aware_invocations: int
    agnostic_time: float
    aware_time: float

    def table(self) -> str:
        rows = [("variant", "nms_invocations", "seconds_per_trial"),
                ("class-agnostic", str(self.agnostic_invocations), f"{self.agnostic_time:.6f}"),
                ("class-aware", str(self.aware_invocations), f"{self.aware_time:.6f}")]
        return "\n".join("\t".join(r) for r in rows) + "\n"


def synthetic_detections(n_boxes: int, n_classes: int, rng: np.random.Generator,
                         image_size: float = 800.0) -> list[ScoredDetection]:
    """Random detections; every class appears at least once when ``n_boxes >= n_classes``."""
    classes = np.arange(n_boxes) % n_classes
    rng.shuffle(classes)
    xy = rng.uniform(0, image_size * 0.8, size=(n_boxes, 2))
    wh = rng.uniform(8, image_size * 0.2, size=(n_boxes, 2))
    scores = rng.uniform(0.05, 1.0, size=n_boxes)
    return [ScoredDetection(BoundingBox(x, y, x + w, y + h), int(c), float(s))
            for (x, y), (w, h), c, s in zip(xy, wh, classes, scores)]


def bench_nms(n_boxes: int, n_classes: int, trials: int = 3, seed: int = 0,
              iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> NmsBenchReport:
    """Time both NMS variants and count how many partition suppressions each runs."""
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    rng = np.random.default_rng(seed)
    dets = synthetic_detections(max(n_boxes, n_classes), n_classes, rng)
    aware_calls = len(_partition(dets))
    t_agn = t_aw = 0.0
    for _ in range(trials):
        t0 = time.perf_counter()
        nms_class_agnostic(dets, iou_threshold)
        t1 = time.perf_counter()
        nms_class_aware(dets, iou_threshold)
        t2 = time.perf_counter()
        t_agn += t1 - t0
        t_aw += t2 - t1
    return NmsBenchReport(len(dets), n_classes, trials, 1, aware_calls, t_agn / trials, t_aw / trials)


# ----------------------------------------------------------------------------
# feature files
#
# Layout (little endian), version 1:
#   magic b"VRGN", u8 version, u32 appearance_dim, u32 n_classes,
#   n_classes x (u16 len, utf-8 class name), u32 n_images,
#   per image: u16 len + utf-8 image_id, f64 width, f64 height, u32 n_regions,
#   then n_regions records of (i32 class_id, f64 score, 4 x f64 box, P x f64 appearance).
# ----------------------------------------------------------------------------

FEATURE_MAGIC = b"VRGN"
FEATURE_VERSION = 1


class FeatureFileError(ValueError):
    pass


@dataclass
class ImageDetections:
    image_id: str
    width: float
    height: float
    detections: list[ScoredDetection]


def _record_dtype(p: int) -> np.dtype:
    return np.dtype([("class_id", "<i4"), ("score", "<f8"), ("box", "<f8", (4,)), ("appearance", "<f8", (p,))])


def _write_str(fh: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise FeatureFileError("truncated feature file")
    return raw


def _read_str(fh: BinaryIO) -> str:
    (n,) = struct.unpack("<H", _read_exact(fh, 2))
    return _read_exact(fh, n).decode("utf-8")


def write_feature_file(path: str | Path, images: Iterable[ImageDetections], class_names: Sequence[str],
                       appearance_dim: int) -> None:
    images = list(images)
    dtype = _record_dtype(appearance_dim)
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<BII", FEATURE_VERSION, appearance_dim, len(class_names)))
        for name in class_names:
            _write_str(fh, name)
        fh.write(struct.pack("<I", len(images)))
        for img in images:
            _write_str(fh, img.image_id)
            fh.write(struct.pack("<ddI", img.width, img.height, len(img.detections)))
            rec = np.zeros(len(img.detections), dtype=dtype)
            for r, d in zip(rec, img.detections):
                r["class_id"] = d.class_id
                r["score"] = d.score
                r["box"] = d.box.as_tuple()
                r["appearance"] = d.appearance
            fh.write(rec.tobytes())


def read_feature_file(path: str | Path) -> tuple[list[str], int, list[ImageDetections]]:
    """Return ``(class_names, appearance_dim, images)``."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != FEATURE_MAGIC:
            raise FeatureFileError(f"{path}: not a region feature file")
        version, p, n_classes = struct.unpack("<BII", _read_exact(fh, 9))
        if version != FEATURE_VERSION:
            raise FeatureFileError(f"{path}: unsupported version {version}")
        names = [_read_str(fh) for _ in range(n_classes)]
        (n_images,) = struct.unpack("<I", _read_exact(fh, 4))
        dtype = _record_dtype(p)
        images = []
        for _ in range(n_images):
            image_id = _read_str(fh)
            w, h, n = struct.unpack("<ddI", _read_exact(fh, 20))
            rec = np.frombuffer(_read_exact(fh, n * dtype.itemsize), dtype=dtype)
            dets = [ScoredDetection(BoundingBox(*map(float, r["box"])), int(r["class_id"]), float(r["score"]),
                                    np.array(r["appearance"], dtype=np.float64)) for r in rec]
            images.append(ImageDetections(image_id, w, h, dets))
    return names, p, images


def iter_region_features(images: Iterable[ImageDetections], normalize: bool = True) -> Iterator[tuple[str, list[RegionFeature]]]:
    for img in images:
        yield img.image_id, [RegionFeature(d.appearance, position_encode(d.box, img.width, img.height, normalize))
                             for d in img.detections]
