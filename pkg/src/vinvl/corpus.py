"""Triple and task files built from synthetic images and extracted region features."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import TokenVocab, tokenize
from .objectives import Triple
from .regions import ImageDetections, iter_region_features, read_feature_file

TRIPLE_KINDS = ("caption", "qa", "tag")
TASKS = ("vqa", "gqa", "caption", "retrieval", "nlvr2")
# QA and tagging triples per captioned image in a caption-heavy corpus mix
# (roughly 2.5M QA and 1.67M tagging triples against 4.68M caption triples)
DEFAULT_QA_RATE = 2.5 / 4.68
DEFAULT_TAG_RATE = 1.67 / 4.68


@dataclass
class TripleRecord:
    id: str
    kind: str
    w: str
    q: str
    feature_file: str
    image_id: str

    def to_json(self) -> dict:
        return {"id": self.id, "kind": self.kind, "w": self.w, "q": self.q,
                "feature_ref": {"file": self.feature_file, "image_id": self.image_id}}

    @classmethod
    def from_json(cls, d: dict) -> TripleRecord:
        if d.get("kind") not in TRIPLE_KINDS:
            raise ValueError(f"triple {d.get('id')!r}: unknown kind {d.get('kind')!r}")
        q = d["q"] if isinstance(d["q"], str) else " ".join(d["q"])
        ref = d["feature_ref"]
        return cls(str(d["id"]), d["kind"], d["w"], q, ref["file"], str(ref["image_id"]))


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def region_tags(image: ImageDetections, class_names: Sequence[str]) -> str:
    """Detected object names in score order, the machine-generated tags."""
    return " ".join(class_names[d.class_id] for d in image.detections)


def build_triples(images: Sequence[dict], regions: dict[str, ImageDetections], class_names: Sequence[str],
                  feature_file: str, qa_rate: float = DEFAULT_QA_RATE, tag_rate: float = DEFAULT_TAG_RATE,
                  rng_seed: int = 0) -> list[TripleRecord]:
    """Caption (w=caption, q=detected tags) triples for every image, plus QA
    (w=question, q=answer) and tagging (w=machine caption, q=human tags) triples
    for seeded fractions ``qa_rate`` and ``tag_rate`` of the images."""
    rng = np.random.default_rng([rng_seed, 0x731])
    out = []
    for img in images:
        iid = img["image_id"]
        take_qa, take_tag = rng.random(2) < (qa_rate, tag_rate)
        tags = region_tags(regions[iid], class_names)
        out.append(TripleRecord(f"{iid}/cap", "caption", img["caption"], tags, feature_file, iid))
        if take_qa:
            color_qa = [qa for qa in img["qa"] if qa.get("type", "color") == "color"]
            for j, qa in enumerate(color_qa):
                out.append(TripleRecord(f"{iid}/qa{j}", "qa", qa["question"], qa["answer"], feature_file, iid))
        if take_tag:
            human = " ".join(o["concept"] for o in img["objects"])
            out.append(TripleRecord(f"{iid}/tag", "tag", img["tagging_caption"], human, feature_file, iid))
    return out


def build_task_files(images: Sequence[dict], regions: dict[str, ImageDetections],
                     class_names: Sequence[str], rng_seed: int) -> dict[str, list[dict]]:
    """Line-delimited records for every downstream task."""
    rng = np.random.default_rng([rng_seed, 0x7A5C])
    ids = [img["image_id"] for img in images]
    by_id = {img["image_id"]: img for img in images}
    tasks: dict[str, list[dict]] = {t: [] for t in TASKS}
    for img in images:
        iid = img["image_id"]
        tags = region_tags(regions[iid], class_names)
        for qa in img["qa"]:
            tasks["vqa"].append({"question": qa["question"], "image_ref": iid, "tags": tags,
                                 "answers": qa["answer_counts"]})
        tasks["gqa"].append({"question": img["qa"][0]["question"], "image_ref": iid, "tags": tags,
                             "answers": {img["qa"][0]["answer"]: 10}})
        tasks["caption"].append({"caption": img["caption"], "image_ref": iid, "tags": tags})
        tasks["retrieval"].append({"sentence": img["caption"], "image_ref": iid, "tags": tags, "matched": True})
    for k, iid in enumerate(ids):
        other = ids[(k + 1 + int(rng.integers(max(len(ids) - 1, 1)))) % len(ids)] if len(ids) > 1 else iid
        concepts_a = {o["concept"] for o in by_id[iid]["objects"]}
        concepts_b = {o["concept"] for o in by_id[other]["objects"]}
        both = sorted(concepts_a & concepts_b)
        if both and rng.random() < 0.5:
            concept, label = both[int(rng.integers(len(both)))], True
        else:
            pool = sorted(concepts_a | concepts_b)
            concept = pool[int(rng.integers(len(pool)))]
            label = concept in concepts_a and concept in concepts_b
        tasks["nlvr2"].append({"statement": f"both images contain a {concept} .", "image_ref_pair": [iid, other],
                               "tags_pair": [region_tags(regions[iid], class_names),
                                             region_tags(regions[other], class_names)], "label": label})
    return tasks


def build_token_vocab(triples: Sequence[TripleRecord], tasks: dict[str, list[dict]]) -> TokenVocab:
    texts = [t.w for t in triples] + [t.q for t in triples]
    for rec in tasks.get("vqa", []) + tasks.get("gqa", []):
        texts.append(rec["question"])
        texts.extend(rec["answers"])
    texts += [r["statement"] for r in tasks.get("nlvr2", [])]
    texts += [r["caption"] for r in tasks.get("caption", [])]
    return TokenVocab.from_texts(texts)


class FeatureStore:
    """Region features keyed by image id, loaded lazily per feature file."""

    def __init__(self, root: str | Path = ".", normalize: bool = True):
        self.root = Path(root)
        self.normalize = normalize
        self._files: dict[str, dict[str, np.ndarray]] = {}
        self.class_names: dict[str, list[str]] = {}

    def add_file(self, name: str, path: str | Path | None = None) -> None:
        names, _, images = read_feature_file(path or self.root / name)
        self.class_names[name] = names
        self._files[name] = {iid: (np.stack([f.concat() for f in feats]) if feats else np.zeros((0, 0)))
                             for iid, feats in iter_region_features(images, self.normalize)}

    def get(self, file: str, image_id: str) -> np.ndarray:
        if file not in self._files:
            self.add_file(file)
        return self._files[file][image_id]


def load_triples(records: Sequence[TripleRecord], store: FeatureStore, vocab: TokenVocab) -> list[Triple]:
    return [Triple(tokenize(r.w, vocab), tokenize(r.q, vocab), store.get(r.feature_file, r.image_id),
                   kind=r.kind, id=r.id) for r in records]
