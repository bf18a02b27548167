"""Synthetic images, detector outputs and texts standing in for real corpora.

Every object has a concept and a colour.  Its appearance vector is the sum of
the concept prototype, a scaled colour prototype and Gaussian noise, so texts
that mention concepts and colours are predictable from region features.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .odcorpus import ClassEntry, write_alias_file, write_annotations
from .regions import BoundingBox, ImageDetections, ScoredDetection, iou, write_feature_file

CONCEPT_NAMES = [
    "cat", "dog", "horse", "car", "bus", "tree", "bench", "cup", "bottle", "chair",
    "table", "boat", "bird", "kite", "clock", "lamp", "book", "vase", "bicycle", "train",
    "sheep", "cow", "umbrella", "laptop", "phone", "pizza", "apple", "banana", "surfboard", "plane",
]
ALIASES = {
    "cat": ["kitty", "kitten"], "dog": ["puppy", "doggy"], "car": ["automobile"], "plane": ["airplane", "aircraft"],
    "phone": ["cellphone", "mobile phone"], "bicycle": ["bike"], "cup": ["mug"], "sofa": ["couch"],
    "table": ["dining table"], "boat": ["ship"],
}
COLOR_NAMES = ["red", "blue", "green", "yellow", "black", "white", "brown", "orange"]
# classes that only the external detection datasets know about
EXTERNAL_ONLY = ["traffic light", "fire hydrant", "skateboard", "toaster", "snowboard", "stop sign"]
# base classes too rare to survive the min-instance filter
RARE_BASE = ["unicorn", "abacus", "gramophone"]

CAPTION_TEMPLATES = [
    "a {c0} {o0} and a {c1} {o1} .",
    "a {c0} {o0} next to a {c1} {o1} .",
    "there is a {c0} {o0} near the {c1} {o1} .",
]
TAGGING_TEMPLATES = ["a photo of a {o0} with a {o1} .", "an image showing a {o0} and a {o1} ."]
QUESTION_TEMPLATE = "what color is the {o} ?"
PRESENCE_TEMPLATE = "is there a {o} ?"
HUMAN_ANSWERERS = 10
BASE_SCALE = 4


@dataclass
class SyntheticWorld:
    concepts: list[str]
    colors: list[str]
    concept_protos: np.ndarray
    color_protos: np.ndarray
    noise: float = 0.3
    color_scale: float = 0.7
    min_objects: int = 2
    max_objects: int = 4
    image_w: float = 640.0
    image_h: float = 480.0
    seed: int = 0

    @classmethod
    def make(cls, seed: int = 0, n_concepts: int = 24, n_colors: int = 6, appearance_dim: int = 64,
             noise: float = 0.3, min_objects: int = 2, max_objects: int = 4,
             color_scale: float = 0.7) -> SyntheticWorld:
        if not 1 <= n_concepts <= len(CONCEPT_NAMES) or not 1 <= n_colors <= len(COLOR_NAMES):
            raise ValueError("too many concepts or colours requested")
        rng = np.random.default_rng([seed, 0xC0C0])
        protos = rng.standard_normal((n_concepts, appearance_dim))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True) / np.sqrt(appearance_dim) * 2
        colors = rng.standard_normal((n_colors, appearance_dim))
        colors /= np.linalg.norm(colors, axis=1, keepdims=True) / np.sqrt(appearance_dim) * 2
        return cls(CONCEPT_NAMES[:n_concepts], COLOR_NAMES[:n_colors], protos, colors, noise, color_scale,
                   min_objects=min_objects, max_objects=max_objects, seed=seed)

    @property
    def appearance_dim(self) -> int:
        return self.concept_protos.shape[1]

    def appearance(self, concept: int, color: int, rng: np.random.Generator) -> np.ndarray:
        return (self.concept_protos[concept] + self.color_scale * self.color_protos[color]
                + self.noise * rng.standard_normal(self.appearance_dim))

    def to_json(self) -> dict:
        d = asdict(self)
        d["concept_protos"] = self.concept_protos.tolist()
        d["color_protos"] = self.color_protos.tolist()
        return d

    @classmethod
    def from_json(cls, d: dict) -> SyntheticWorld:
        d = dict(d)
        d["concept_protos"] = np.array(d["concept_protos"])
        d["color_protos"] = np.array(d["color_protos"])
        return cls(**d)


@dataclass
class SyntheticObject:
    concept: str
    color: str
    box: BoundingBox


@dataclass
class SyntheticImage:
    image_id: str
    width: float
    height: float
    objects: list[SyntheticObject]
    appearances: list[np.ndarray] = field(repr=False)
    caption: str = ""
    tagging_caption: str = ""
    qa: list[dict] = field(default_factory=list)

    def record(self) -> dict:
        return {"image_id": self.image_id, "width": self.width, "height": self.height,
                "objects": [{"concept": o.concept, "color": o.color, "box": list(o.box.as_tuple())}
                            for o in self.objects],
                "caption": self.caption, "tagging_caption": self.tagging_caption, "qa": self.qa}


def _place_boxes(n: int, w: float, h: float, rng: np.random.Generator) -> list[BoundingBox]:
    boxes: list[BoundingBox] = []
    while len(boxes) < n:
        bw, bh = rng.uniform(0.15, 0.4) * w, rng.uniform(0.15, 0.4) * h
        x, y = rng.uniform(0, w - bw), rng.uniform(0, h - bh)
        box = BoundingBox(float(x), float(y), float(x + bw), float(y + bh))
        if all(iou(box, b) < 0.1 for b in boxes):
            boxes.append(box)
    return boxes


def _answer_counts(true: str, options: list[str], rng: np.random.Generator) -> dict[str, int]:
    agree = int(rng.integers(6, HUMAN_ANSWERERS + 1))
    counts = {true: agree}
    for _ in range(HUMAN_ANSWERERS - agree):
        other = options[int(rng.integers(len(options)))]
        counts[other] = counts.get(other, 0) + 1
    return dict(sorted(counts.items()))


def generate_image(world: SyntheticWorld, index: int, rng_seed: int) -> SyntheticImage:
    rng = np.random.default_rng([rng_seed, index])
    n = int(rng.integers(world.min_objects, world.max_objects + 1))
    concepts = rng.choice(len(world.concepts), size=n, replace=False)
    colors = rng.integers(0, len(world.colors), size=n)
    boxes = _place_boxes(n, world.image_w, world.image_h, rng)
    objects = [SyntheticObject(world.concepts[c], world.colors[k], b) for c, k, b in zip(concepts, colors, boxes)]
    appearances = [world.appearance(int(c), int(k), rng) for c, k in zip(concepts, colors)]
    pick = rng.choice(n, size=2, replace=False)
    o0, o1 = objects[pick[0]], objects[pick[1]]
    caption = CAPTION_TEMPLATES[int(rng.integers(len(CAPTION_TEMPLATES)))].format(
        c0=o0.color, o0=o0.concept, c1=o1.color, o1=o1.concept)
    tagging = TAGGING_TEMPLATES[int(rng.integers(len(TAGGING_TEMPLATES)))].format(o0=o0.concept, o1=o1.concept)
    target = objects[int(rng.integers(n))]
    qa = [{"question": QUESTION_TEMPLATE.format(o=target.concept), "answer": target.color,
           "answer_counts": _answer_counts(target.color, world.colors, rng), "type": "color"}]
    if rng.random() < 0.5:
        present, concept = "yes", objects[int(rng.integers(n))].concept
    else:
        absent = [c for c in world.concepts if c not in {o.concept for o in objects}]
        present, concept = "no", absent[int(rng.integers(len(absent)))]
    qa.append({"question": PRESENCE_TEMPLATE.format(o=concept), "answer": present,
               "answer_counts": _answer_counts(present, ["yes", "no"], rng), "type": "presence"})
    return SyntheticImage(f"img{index:06d}", world.image_w, world.image_h, objects, appearances,
                          caption, tagging, qa)


def _jitter(box: BoundingBox, scale: float, rng: np.random.Generator, w: float, h: float) -> BoundingBox:
    dx, dy = rng.uniform(-scale, scale, 2) * np.array([box.width, box.height])
    x1 = float(np.clip(box.x1 + dx, 0, w - 1))
    y1 = float(np.clip(box.y1 + dy, 0, h - 1))
    x2 = float(np.clip(box.x2 + dx, x1 + 1, w))
    y2 = float(np.clip(box.y2 + dy, y1 + 1, h))
    return BoundingBox(x1, y1, x2, y2)


def detector_outputs(world: SyntheticWorld, image: SyntheticImage, rng_seed: int,
                     duplicates: int = 2) -> ImageDetections:
    """Pre-NMS detections: a confident box per object plus overlapping lower-scored duplicates.

    Duplicates include a box labelled with a wrong class, which class-aware NMS
    would keep and class-agnostic NMS removes.
    """
    rng = np.random.default_rng([rng_seed, int(image.image_id[3:]), 1])
    dets = []
    for obj, app in zip(image.objects, image.appearances):
        cid = world.concepts.index(obj.concept)
        score = float(rng.uniform(0.7, 0.99))
        dets.append(ScoredDetection(obj.box, cid, score, app))
        for d in range(duplicates + 1):
            wrong = d == duplicates
            cls = (cid + 1 + int(rng.integers(len(world.concepts) - 1))) % len(world.concepts) if wrong else cid
            noisy = app + 0.1 * world.noise * rng.standard_normal(world.appearance_dim)
            dets.append(ScoredDetection(_jitter(obj.box, 0.04, rng, image.width, image.height), cls,
                                        float(score * rng.uniform(0.3, 0.9)), noisy))
    order = rng.permutation(len(dets))
    return ImageDetections(image.image_id, image.width, image.height, [dets[i] for i in order])


# ----------------------------------------------------------------------------
# detection datasets for vocabulary merging
# ----------------------------------------------------------------------------

def detection_datasets(world: SyntheticWorld, rng_seed: int, images_per_dataset: int = 120) -> dict:
    """Annotation-only datasets: a base with aliases and three externals naming classes differently."""
    rng = np.random.default_rng([rng_seed, 0xD5])
    base_classes = [ClassEntry(c, frozenset(ALIASES.get(c, [])), "vg") for c in world.concepts]
    base_classes += [ClassEntry(c, frozenset(), "vg") for c in RARE_BASE]
    externals = {}
    ext_names = ["coco", "objects365", "openimages"]
    for j, name in enumerate(ext_names):
        picks = rng.choice(len(world.concepts), size=len(world.concepts) // 2, replace=False)
        classes = []
        for p in sorted(picks):
            concept = world.concepts[p]
            alias = ALIASES.get(concept)
            shown = alias[j % len(alias)] if alias and rng.random() < 0.7 else concept
            classes.append(ClassEntry(shown, frozenset(), name))
        extras = EXTERNAL_ONLY[2 * j:2 * j + 2] + ([EXTERNAL_ONLY[0]] if j == 2 else [])
        classes += [ClassEntry(e, frozenset(), name) for e in extras]
        externals[name] = classes

    def records(classes: list[ClassEntry], prefix: str, rare: set[str], n_images: int) -> list[dict]:
        out = []
        weights = np.array([0.02 if c.canonical_name in rare else 1.0 for c in classes])
        # long tail so class-aware sampling has something to do
        weights *= 1.0 / (1 + np.arange(len(classes))) ** 0.7
        weights /= weights.sum()
        for i in range(n_images):
            n = int(rng.integers(1, 5))
            anns = []
            for c in rng.choice(len(classes), size=n, p=weights):
                x, y = rng.uniform(0, 500), rng.uniform(0, 350)
                anns.append({"class_name": classes[c].canonical_name, "x1": round(float(x), 2),
                             "y1": round(float(y), 2), "x2": round(float(x + rng.uniform(20, 140)), 2),
                             "y2": round(float(y + rng.uniform(20, 130)), 2)})
            out.append({"image_id": f"{prefix}{i:05d}", "width": 640.0, "height": 480.0, "annotations": anns})
        return out

    # the base dataset is the largest, so its tail classes clear the min-instance filter
    out = {"vg": (base_classes, records(base_classes, "vg", set(RARE_BASE), BASE_SCALE * images_per_dataset))}
    for name, classes in externals.items():
        out[name] = (classes, records(classes, name[:2], set(), images_per_dataset))
    return out


# ----------------------------------------------------------------------------
# writing everything
# ----------------------------------------------------------------------------

def generate_synthetic_corpus(world: SyntheticWorld, n_images: int, rng_seed: int, out_dir: str | Path,
                              od_images_per_dataset: int = 120) -> dict[str, Path]:
    """Write world, images, raw detections and detection datasets under ``out_dir``."""
    out = Path(out_dir)
    (out / "od").mkdir(parents=True, exist_ok=True)
    paths = {"world": out / "world.json", "images": out / "images.jsonl", "detections": out / "detections.bin"}
    paths["world"].write_text(json.dumps(world.to_json(), sort_keys=True), encoding="utf-8")
    images = [generate_image(world, i, rng_seed) for i in range(n_images)]
    with open(paths["images"], "w", encoding="utf-8") as fh:
        for img in images:
            fh.write(json.dumps(img.record(), sort_keys=True) + "\n")
    write_feature_file(paths["detections"], [detector_outputs(world, img, rng_seed) for img in images],
                       world.concepts, world.appearance_dim)
    for name, (classes, records) in detection_datasets(world, rng_seed, od_images_per_dataset).items():
        write_alias_file(out / "od" / f"{name}.aliases", classes)
        write_annotations(out / "od" / f"{name}.jsonl", records)
        paths[f"od/{name}"] = out / "od" / f"{name}.jsonl"
    return paths
