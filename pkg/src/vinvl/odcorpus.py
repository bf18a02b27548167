"""Unifying object-detection datasets: vocabulary merging and epoch sampling."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_MIN_INSTANCES = 30
DEFAULT_MIN_PER_CLASS = 2000
PASS_CAP_FACTOR = 100


class VocabularyError(ValueError):
    pass


class AmbiguousAliasError(VocabularyError):
    pass


def normalize_class_name(raw: str) -> str:
    name = " ".join(raw.split()).lower()
    if not name:
        raise VocabularyError(f"class name {raw!r} is empty after normalization")
    return name


@dataclass
class ClassEntry:
    canonical_name: str
    aliases: frozenset[str] = frozenset()
    source_dataset: str = ""
    instance_count: int = 0

    def __post_init__(self):
        self.canonical_name = normalize_class_name(self.canonical_name)
        self.aliases = frozenset({normalize_class_name(a) for a in self.aliases} | {self.canonical_name})
        if self.instance_count < 0:
            raise VocabularyError(f"{self.canonical_name}: negative instance count")


@dataclass
class MergedClass:
    canonical_name: str
    aliases: set[str]
    sources: list[str]
    source_ids: dict[str, list[int]]
    instance_count: int
    from_base: bool

    def provenance(self) -> str:
        return ",".join(f"{src}:{'+'.join(map(str, ids))}" for src, ids in self.source_ids.items())


@dataclass
class MergedVocabulary:
    entries: list[MergedClass]
    _lookup: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._lookup = {}
        for i, e in enumerate(self.entries):
            for a in e.aliases:
                if a in self._lookup:
                    raise AmbiguousAliasError(f"alias {a!r} shared by {self.entries[self._lookup[a]].canonical_name!r}"
                                              f" and {e.canonical_name!r}")
                self._lookup[a] = i

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.canonical_name for e in self.entries]

    def index_of(self, name: str) -> int:
        """Merged class id for any known alias."""
        return self._lookup[normalize_class_name(name)]

    def get(self, name: str) -> int | None:
        return self._lookup.get(normalize_class_name(name))

    def class_map(self, dataset: str) -> dict[int, int]:
        """Source class id -> merged class id for one dataset."""
        out = {}
        for i, e in enumerate(self.entries):
            for sid in e.source_ids.get(dataset, []):
                out[sid] = i
        return out


def merge_vocabularies(base: Sequence[ClassEntry], others: Sequence[Sequence[ClassEntry]],
                       min_instances: int = DEFAULT_MIN_INSTANCES) -> MergedVocabulary:
    """Merge external class lists into a filtered base vocabulary by exact alias match.

    Base classes under ``min_instances`` are dropped first.  An external class
    joins the surviving base class whose alias set it intersects; unmatched
    classes become new entries (and later unmatched classes may join those).
    Matching more than one entry raises :class:`AmbiguousAliasError`.
    """
    entries: list[MergedClass] = []
    owner: dict[str, int] = {}
    for sid, c in enumerate(base):
        if c.instance_count < min_instances:
            continue
        for a in c.aliases:
            if a in owner:
                raise AmbiguousAliasError(f"alias {a!r} shared by base classes "
                                          f"{entries[owner[a]].canonical_name!r} and {c.canonical_name!r}")
            owner[a] = len(entries)
        entries.append(MergedClass(c.canonical_name, set(c.aliases), [c.source_dataset],
                                   {c.source_dataset: [sid]}, c.instance_count, True))

    for dataset in others:
        # match against the vocabulary as it stood before this dataset
        frozen_owner = dict(owner)
        pending: list[tuple[int, ClassEntry, int | None]] = []
        for sid, c in enumerate(dataset):
            hits = sorted({frozen_owner[a] for a in c.aliases if a in frozen_owner})
            if len(hits) > 1:
                names = [entries[h].canonical_name for h in hits]
                raise AmbiguousAliasError(f"class {c.canonical_name!r} ({c.source_dataset}) matches {names}")
            pending.append((sid, c, hits[0] if hits else None))
        for sid, c, hit in pending:
            if hit is None:
                for a in c.aliases:
                    if a in owner:
                        raise AmbiguousAliasError(f"alias {a!r} of {c.canonical_name!r} collides within "
                                                  f"{c.source_dataset}")
                    owner[a] = len(entries)
                entries.append(MergedClass(c.canonical_name, set(c.aliases), [c.source_dataset],
                                           {c.source_dataset: [sid]}, c.instance_count, False))
                continue
            e = entries[hit]
            if c.source_dataset not in e.source_ids:
                e.sources.append(c.source_dataset)
                e.source_ids[c.source_dataset] = []
            e.source_ids[c.source_dataset].append(sid)
            e.instance_count += c.instance_count
            for a in c.aliases:
                # aliases already owned elsewhere stay with their owner
                if a not in owner:
                    owner[a] = hit
                    e.aliases.add(a)
    return MergedVocabulary(entries)


# ----------------------------------------------------------------------------
# sampling
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Sampling:
    """``full`` copies every image; ``class_aware`` tops up rare classes first."""

    mode: str = "full"
    copies: int = 1
    min_per_class: int = DEFAULT_MIN_PER_CLASS

    def __post_init__(self):
        if self.mode not in ("full", "class_aware"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.copies < 1 or self.min_per_class < 1:
            raise ValueError("copies and min_per_class must be >= 1")

    @classmethod
    def full_copies(cls, k: int) -> Sampling:
        return cls("full", k)

    @classmethod
    def class_aware(cls, min_per_class: int = DEFAULT_MIN_PER_CLASS, k: int = 1) -> Sampling:
        return cls("class_aware", k, min_per_class)


@dataclass
class DatasetSpec:
    name: str
    image_records: list[tuple[str, list[tuple[int, object]]]]
    sampling: Sampling = Sampling()


def instance_counts(spec: DatasetSpec, image_ids: Iterable[str] | None = None) -> Counter:
    """Annotation instances per class over ``image_ids`` (with multiplicity; default all images)."""
    per_image = {iid: Counter(cid for cid, _ in anns) for iid, anns in spec.image_records}
    total: Counter = Counter()
    for iid in (image_ids if image_ids is not None else per_image):
        total.update(per_image[iid])
    return total


def class_aware_sample(spec: DatasetSpec, min_per_class: int = DEFAULT_MIN_PER_CLASS,
                       rng_seed: int = 0) -> list[str]:
    """One full pass over the images, then uniform redraws of images holding deficient classes.

    Draws are with replacement and an image is accepted when it contains at
    least one class still below ``min_per_class``.  Stops when every class
    reaches its quota or after ``PASS_CAP_FACTOR * len(images)`` draws.
    """
    if not spec.image_records:
        raise ValueError(f"{spec.name}: no image records")
    rng = np.random.default_rng(rng_seed)
    image_ids = [iid for iid, _ in spec.image_records]
    per_image = [Counter(cid for cid, _ in anns) for _, anns in spec.image_records]
    counts: Counter = Counter()
    for c in per_image:
        counts.update(c)
    deficient = {cid for cid, n in counts.items() if n < min_per_class}
    sampled = list(image_ids)
    budget = PASS_CAP_FACTOR * len(image_ids)
    while deficient and budget > 0:
        chunk = rng.integers(0, len(image_ids), size=min(budget, 4096))
        budget -= len(chunk)
        for i in chunk:
            if not deficient:
                break
            if deficient.isdisjoint(per_image[i]):
                continue
            sampled.append(image_ids[i])
            counts.update(per_image[i])
            deficient -= {cid for cid in per_image[i] if counts[cid] >= min_per_class}
    return sampled


def sampled_images(spec: DatasetSpec, rng_seed: int) -> list[str]:
    if spec.sampling.mode == "class_aware":
        return class_aware_sample(spec, spec.sampling.min_per_class, rng_seed)
    return [iid for iid, _ in spec.image_records]


def build_epoch_schedule(specs: Sequence[DatasetSpec], rng_seed: int = 0) -> list[tuple[str, str]]:
    """``copies`` repetitions of each dataset's sampled images, shuffled together."""
    schedule: list[tuple[str, str]] = []
    for i, spec in enumerate(specs):
        images = sampled_images(spec, int(np.random.SeedSequence([rng_seed, i]).generate_state(1)[0]))
        schedule.extend((spec.name, iid) for iid in images * spec.sampling.copies)
    order = np.random.default_rng(rng_seed).permutation(len(schedule))
    return [schedule[j] for j in order]


def epoch_size(contributions: Iterable[tuple[float, int]]) -> float:
    """Images per epoch from ``(sampled images, copies)`` pairs."""
    return sum(n * k for n, k in contributions)


# ----------------------------------------------------------------------------
# files
# ----------------------------------------------------------------------------

def read_alias_file(path: str | Path, dataset: str, counts: dict[str, int] | None = None) -> list[ClassEntry]:
    """One class per line: canonical name, then aliases, tab separated."""
    entries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        try:
            name = normalize_class_name(fields[0])
        except VocabularyError as exc:
            raise VocabularyError(f"{path}:{lineno}: {exc}") from None
        entries.append(ClassEntry(name, frozenset(f for f in fields[1:] if f.strip()), dataset,
                                  (counts or {}).get(name, 0)))
    return entries


def write_alias_file(path: str | Path, entries: Iterable[ClassEntry]) -> None:
    lines = []
    for e in entries:
        rest = sorted(e.aliases - {e.canonical_name})
        lines.append("\t".join([e.canonical_name, *rest]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_annotations(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records


def write_annotations(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def annotation_counts(records: Iterable[dict]) -> Counter:
    return Counter(normalize_class_name(a["class_name"]) for r in records for a in r["annotations"])


def dataset_spec_from_annotations(name: str, records: Sequence[dict], classes: Sequence[ClassEntry],
                                  sampling: Sampling = Sampling()) -> DatasetSpec:
    """Map annotation class names to dataset-local ids (unknown names raise ``KeyError``)."""
    local = {}
    for i, c in enumerate(classes):
        for a in c.aliases:
            local.setdefault(a, i)
    image_records = []
    for r in records:
        anns = [(local[normalize_class_name(a["class_name"])], (a["x1"], a["y1"], a["x2"], a["y2"]))
                for a in r["annotations"]]
        image_records.append((str(r["image_id"]), anns))
    return DatasetSpec(name, image_records, sampling)


MERGED_HEADER = "#merged-vocabulary v1\tcanonical\tprovenance\tinstances\taliases..."


def write_merged_vocabulary(path: str | Path, vocab: MergedVocabulary) -> None:
    lines = [MERGED_HEADER]
    for e in vocab.entries:
        rest = sorted(e.aliases - {e.canonical_name})
        lines.append("\t".join([e.canonical_name, e.provenance(), str(e.instance_count), *rest]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_merged_vocabulary(path: str | Path, base: str | None = None) -> MergedVocabulary:
    """Inverse of :func:`write_merged_vocabulary`; entries whose first source is ``base`` count as base classes."""
    entries = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        name, prov, count, *aliases = line.split("\t")
        source_ids: dict[str, list[int]] = {}
        for part in prov.split(","):
            src, ids = part.rsplit(":", 1)
            source_ids[src] = [int(i) for i in ids.split("+")]
        sources = list(source_ids)
        entries.append(MergedClass(name, {name, *aliases}, sources, source_ids, int(count),
                                   base is not None and sources[0] == base))
    return MergedVocabulary(entries)


def write_schedule(path: str | Path, schedule: Iterable[tuple[str, str]]) -> None:
    Path(path).write_text("".join(f"{d}\t{i}\n" for d, i in schedule), encoding="utf-8")
