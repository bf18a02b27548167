"""The steps behind each CLI subcommand, writing into versioned run directories.

Every step reads its inputs, writes its outputs into one run directory and
finishes with ``manifest.json``: the command, the resolved configuration and
its hash, the seeds, and SHA-256 digests of inputs and outputs.  Nothing
time-dependent is recorded, so equal (config, seeds) give equal files.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import corpus as corpus_mod
from .config import PipelineConfig, render_config
from .finetune import TASK_NAMES, FinetuneSettings, TaskDataError, load_task, train_loop
from .model import ModelConfig, TokenVocab, load_checkpoint, save_checkpoint
from .objectives import PollutionError, PollutionPool
from .odcorpus import (Sampling, VocabularyError, annotation_counts, build_epoch_schedule,
                       dataset_spec_from_annotations, instance_counts, merge_vocabularies, read_alias_file,
                       read_annotations, write_merged_vocabulary, write_schedule)
from .regions import (FeatureFileError, ImageDetections, InvalidBoxError, bench_nms, extract_region_features,
                      read_feature_file, write_feature_file)
from .synthetic import SyntheticWorld, generate_synthetic_corpus
from .tensor import Adam
from .training import PretrainSettings, contrastive_accuracy, new_pretrain_model, pretrain_steps, smoothed

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
SMOOTHING_WINDOW = 20


class MissingInputError(FileNotFoundError):
    """A required input file or directory does not exist."""


class DataInvariantError(ValueError):
    """Input data violates an invariant (bad boxes, ambiguous aliases, ...)."""


DATA_ERRORS = (VocabularyError, InvalidBoxError, FeatureFileError, PollutionError, TaskDataError,
               json.JSONDecodeError)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def require(path: str | Path, what: str = "input") -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"missing {what}: {p}")
    return p


@dataclass
class RunDir:
    """One output directory plus the bookkeeping for its manifest."""

    path: Path
    command: str
    config: PipelineConfig
    seeds: dict[str, int] = field(default_factory=dict)
    inputs: dict[str, Path] = field(default_factory=dict)

    def __post_init__(self):
        self.path = Path(self.path)
        self.path.mkdir(parents=True, exist_ok=True)

    def file(self, name: str) -> Path:
        p = self.path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def add_input(self, name: str, path: str | Path) -> Path:
        p = require(path, name)
        self.inputs[name] = p
        return p

    def finish(self) -> Path:
        (self.path / "config.txt").write_text(render_config(self.config), encoding="utf-8")
        outputs = {}
        for p in sorted(self.path.rglob("*")):
            if p.is_file() and p.name != MANIFEST_NAME:
                outputs[p.relative_to(self.path).as_posix()] = sha256_file(p)
        inputs = {}
        for name, p in sorted(self.inputs.items()):
            files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
            h = hashlib.sha256()
            for q in files:
                h.update(q.relative_to(p).as_posix().encode() if p.is_dir() else b"")
                h.update(sha256_file(q).encode())
            inputs[name] = h.hexdigest()
        manifest = {"manifest_version": MANIFEST_VERSION, "command": self.command,
                    "config_hash": self.config.hash(), "config": self.config.to_dict(),
                    "seeds": self.seeds, "inputs": inputs, "outputs": outputs}
        path = self.path / MANIFEST_NAME
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def read_manifest(run_dir: str | Path) -> dict:
    return json.loads(require(Path(run_dir) / MANIFEST_NAME, "manifest").read_text(encoding="utf-8"))


def write_kv(path: str | Path, values: dict) -> None:
    """``key<TAB>value`` lines in insertion order; floats in shortest round-trip form."""
    lines = [f"{k}\t{_fmt(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_kv(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            k, v = line.split("\t", 1)
            out[k] = v
    return out


def write_tsv(path: str | Path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    cols = list(columns or (rows[0].keys() if rows else []))
    lines = ["\t".join(cols)] + ["\t".join(_fmt(r[c]) for c in cols) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_tsv(path: str | Path) -> list[dict[str, str]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        return []
    cols = lines[0].split("\t")
    return [dict(zip(cols, line.split("\t"))) for line in lines[1:] if line]


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


# ----------------------------------------------------------------------------
# gen-synthetic
# ----------------------------------------------------------------------------

def make_world(cfg: PipelineConfig) -> SyntheticWorld:
    w = cfg.world
    return SyntheticWorld.make(cfg.seed, n_concepts=w.n_concepts, n_colors=w.n_colors,
                               appearance_dim=w.appearance_dim, noise=w.noise)


def gen_synthetic(cfg: PipelineConfig, out: str | Path) -> RunDir:
    run = RunDir(out, "gen-synthetic", cfg, {"seed": cfg.seed})
    world = make_world(cfg)
    generate_synthetic_corpus(world, cfg.world.n_images, cfg.seed, run.path, cfg.world.od_images_per_dataset)
    write_kv(run.file("report.txt"), {"images": cfg.world.n_images, "concepts": len(world.concepts),
                                      "colors": len(world.colors), "appearance_dim": world.appearance_dim})
    run.finish()
    return run


# ----------------------------------------------------------------------------
# merge-vocab / sample-epoch
# ----------------------------------------------------------------------------

def _od_datasets(od_dir: Path) -> dict[str, tuple[Path, Path]]:
    found = {}
    for ann in sorted(od_dir.glob("*.jsonl")):
        alias = ann.with_suffix(".aliases")
        found[ann.stem] = (require(alias, "alias file"), ann)
    if not found:
        raise MissingInputError(f"missing input: no *.jsonl detection datasets in {od_dir}")
    return found


def load_od_classes(od_dir: Path) -> dict[str, tuple[list, list[dict]]]:
    """Per dataset: class entries with instance counts, and annotation records."""
    out = {}
    for name, (alias, ann) in _od_datasets(od_dir).items():
        records = read_annotations(ann)
        out[name] = (read_alias_file(alias, name, dict(annotation_counts(records))), records)
    return out


def merge_vocab(cfg: PipelineConfig, od_dir: str | Path, out: str | Path) -> RunDir:
    run = RunDir(out, "merge-vocab", cfg, {"seed": cfg.seed})
    od = run.add_input("od", od_dir)
    data = load_od_classes(od)
    if cfg.vocab.base not in data:
        raise MissingInputError(f"missing input: base dataset {cfg.vocab.base!r} not found in {od}")
    base = data[cfg.vocab.base][0]
    others = [data[n][0] for n in sorted(data) if n != cfg.vocab.base]
    merged = merge_vocabularies(base, others, cfg.vocab.min_instances)
    write_merged_vocabulary(run.file("merged_vocabulary.tsv"), merged)
    rows = []
    names = merged.names
    for name in sorted(data):
        classes = data[name][0]
        cmap = merged.class_map(name)
        for i, c in enumerate(classes):
            if i in cmap:
                rows.append({"dataset": name, "source_id": i, "source_name": c.canonical_name,
                             "merged_id": cmap[i], "merged_name": names[cmap[i]]})
    write_tsv(run.file("class_map.tsv"), rows, ["dataset", "source_id", "source_name", "merged_id", "merged_name"])
    retained = sum(1 for e in merged.entries if e.from_base)
    write_kv(run.file("report.txt"), {
        "base_classes": len(base),
        "retained_base": retained,
        "filtered_base": len(base) - retained,
        "unmatched_added": len(merged) - retained,
        "total": len(merged),
    })
    run.finish()
    return run


def sample_epoch(cfg: PipelineConfig, od_dir: str | Path, out: str | Path) -> RunDir:
    run = RunDir(out, "sample-epoch", cfg, {"seed": cfg.seed})
    od = run.add_input("od", od_dir)
    data = load_od_classes(od)
    plan = cfg.sampling.parsed()
    specs = []
    for name in sorted(data):
        mode, copies = plan.get(name, ("full", 1))
        try:
            sampling = Sampling(mode, copies, cfg.sampling.min_per_class)
        except ValueError as exc:
            raise DataInvariantError(f"sampling plan for {name}: {exc}") from None
        classes, records = data[name]
        try:
            specs.append(dataset_spec_from_annotations(name, records, classes, sampling))
        except KeyError as exc:
            raise DataInvariantError(f"{name}: annotation class {exc.args[0]!r} is not in its alias file") from None
    schedule = build_epoch_schedule(specs, cfg.seed)
    write_schedule(run.file("schedule.tsv"), schedule)
    rows = []
    for spec in specs:
        classes = data[spec.name][0]
        picked = [iid for d, iid in schedule if d == spec.name]
        before, after = instance_counts(spec), instance_counts(spec, picked)
        for cid in sorted(before):
            rows.append({"dataset": spec.name, "class": classes[cid].canonical_name, "available": before[cid],
                         "sampled": after[cid], "quota": spec.sampling.min_per_class
                         if spec.sampling.mode == "class_aware" else 0})
    write_tsv(run.file("class_counts.tsv"), rows, ["dataset", "class", "available", "sampled", "quota"])
    write_kv(run.file("report.txt"), {"epoch_images": len(schedule),
                                      **{f"images.{s.name}": sum(1 for d, _ in schedule if d == s.name)
                                         for s in specs}})
    run.finish()
    return run


# ----------------------------------------------------------------------------
# extract-regions
# ----------------------------------------------------------------------------

def extract_regions(cfg: PipelineConfig, detections: str | Path, out: str | Path) -> RunDir:
    run = RunDir(out, "extract-regions", cfg, {"seed": cfg.seed})
    src = run.add_input("detections", detections)
    names, dim, images = read_feature_file(src)
    r = cfg.regions
    kept_images, n_in, n_out = [], 0, 0
    for im in images:
        kept, _ = extract_region_features(im.detections, im.width, im.height, r.iou_threshold, r.max_regions,
                                          r.score_floor, r.normalize_positions)
        n_in += len(im.detections)
        n_out += len(kept)
        kept_images.append(ImageDetections(im.image_id, im.width, im.height, kept))
    write_feature_file(run.file("regions.bin"), kept_images, names, dim)
    write_kv(run.file("report.txt"), {"images": len(images), "detections_in": n_in, "regions_out": n_out,
                                      "appearance_dim": dim})
    run.finish()
    return run


# ----------------------------------------------------------------------------
# build-corpus
# ----------------------------------------------------------------------------

CORPUS_FILES = {"triples": "triples.jsonl", "vocab": "vocab.txt"}


def build_corpus(cfg: PipelineConfig, data_dir: str | Path, regions_dir: str | Path, out: str | Path) -> RunDir:
    run = RunDir(out, "build-corpus", cfg, {"seed": cfg.seed})
    images_path = run.add_input("images", Path(data_dir) / "images.jsonl")
    regions_path = run.add_input("regions", Path(regions_dir) / "regions.bin")
    images = corpus_mod.read_jsonl(images_path)
    names, _, region_images = read_feature_file(regions_path)
    regions = {im.image_id: im for im in region_images}
    missing = [img["image_id"] for img in images if img["image_id"] not in regions]
    if missing:
        raise DataInvariantError(f"{regions_path}: no regions for image {missing[0]!r}")
    feature_ref = os.path.relpath(regions_path, run.path)
    triples = corpus_mod.build_triples(images, regions, names, feature_ref, cfg.corpus.qa_rate,
                                       cfg.corpus.tag_rate, cfg.seed)
    tasks = corpus_mod.build_task_files(images, regions, names, cfg.seed)
    corpus_mod.write_jsonl(run.file(CORPUS_FILES["triples"]), [t.to_json() for t in triples])
    for name, records in tasks.items():
        corpus_mod.write_jsonl(run.file(f"tasks/{name}.jsonl"), records)
    vocab = corpus_mod.build_token_vocab(triples, tasks)
    vocab.save(run.file(CORPUS_FILES["vocab"]))
    counts = {k: sum(1 for t in triples if t.kind == k) for k in corpus_mod.TRIPLE_KINDS}
    write_kv(run.file("report.txt"), {"images": len(images), "triples": len(triples),
                                      **{f"triples.{k}": v for k, v in counts.items()},
                                      **{f"task.{k}": len(v) for k, v in tasks.items()},
                                      "vocab_size": len(vocab)})
    run.finish()
    return run


@dataclass
class Corpus:
    root: Path
    vocab: TokenVocab
    records: list[corpus_mod.TripleRecord]
    store: corpus_mod.FeatureStore

    @classmethod
    def load(cls, root: str | Path, normalize: bool = True) -> Corpus:
        root = require(root, "corpus directory")
        vocab = TokenVocab.load(require(root / CORPUS_FILES["vocab"], "vocabulary"))
        records = [corpus_mod.TripleRecord.from_json(d)
                   for d in corpus_mod.read_jsonl(require(root / CORPUS_FILES["triples"], "triple file"))]
        return cls(root, vocab, records, corpus_mod.FeatureStore(root, normalize))

    def triples(self):
        for r in self.records:
            require(self.root / r.feature_file, "feature file")
        return corpus_mod.load_triples(self.records, self.store, self.vocab)

    def task_records(self, task: str) -> list[dict]:
        return corpus_mod.read_jsonl(require(self.root / "tasks" / f"{task}.jsonl", f"{task} task file"))

    def regions_for(self, image_id: str) -> np.ndarray:
        feature_file = self.records[0].feature_file
        return self.store.get(feature_file, image_id)


# ----------------------------------------------------------------------------
# pretrain
# ----------------------------------------------------------------------------

PRETRAIN_COLUMNS = ["step", "loss", "mtl", "cl3", "cl3_acc", "n_masked"]


def model_config_for(cfg: PipelineConfig, vocab: TokenVocab) -> ModelConfig:
    d = dict(cfg.model.__dict__)
    d["vocab_size"] = len(vocab)
    d["appearance_dim"] = cfg.world.appearance_dim
    return ModelConfig(**d)


def pretrain_settings(cfg: PipelineConfig) -> PretrainSettings:
    p = cfg.pretrain
    return PretrainSettings(p.steps, p.batch_size, p.lr, p.mask_prob, cfg.seed, p.mtl_on_polluted)


def save_pretrain_checkpoint(path: Path, params, opt: Adam, config: ModelConfig, step: int) -> None:
    save_checkpoint(path, params, config, {"kind": "pretrain", "step": step, "param_order": list(params)},
                    {f"adam/{k}": v for k, v in opt.state().items()})


def pretrain(cfg: PipelineConfig, corpus_dir: str | Path, out: str | Path, resume: str | Path | None = None,
             on_step: Callable[[int, dict], None] | None = None) -> RunDir:
    """Pre-train, checkpointing every ``checkpoint_every`` steps and at the end.

    With ``resume`` the parameters, optimiser state and metrics so far are
    restored and training continues at the recorded step.
    """
    run = RunDir(out, "pretrain", cfg, {"seed": cfg.seed})
    corpus = Corpus.load(run.add_input("corpus", corpus_dir), cfg.regions.normalize_positions)
    triples = corpus.triples()
    pool = PollutionPool.from_triples(triples)
    settings = pretrain_settings(cfg)
    rows: list[dict] = []
    if resume is not None:
        params, config, extra, aux = load_checkpoint(run.add_input("resume", resume))
        start = int(extra["step"])
        opt = Adam([params[k] for k in extra["param_order"]], lr=settings.lr)
        opt.load_state({k[5:]: v for k, v in aux.items() if k.startswith("adam/")})
        prior = Path(resume).parent / "metrics.tsv"
        if prior.exists():
            rows = [{c: (float(r[c]) if c not in ("step", "n_masked") else int(r[c])) for c in PRETRAIN_COLUMNS}
                    for r in read_tsv(prior)][:start]
    else:
        config = model_config_for(cfg, corpus.vocab)
        params = new_pretrain_model(config, cfg.seed)
        opt = Adam(params.values(), lr=settings.lr)
        start = 0
    every = max(cfg.pretrain.checkpoint_every, 1)
    step = start
    while step < settings.steps:
        stop = min(settings.steps, (step // every + 1) * every)
        rows += pretrain_steps(params, opt, triples, pool, corpus.vocab, config, settings, step, stop, on_step)
        step = stop
        save_pretrain_checkpoint(run.file(f"checkpoints/step{step:06d}.npz"), params, opt, config, step)
    save_pretrain_checkpoint(run.file("checkpoint.npz"), params, opt, config, step)
    write_tsv(run.file("metrics.tsv"), rows, PRETRAIN_COLUMNS)
    report = pretrain_report(rows, params, triples, pool, corpus.vocab, config, cfg.seed)
    write_kv(run.file("report.txt"), report)
    from .plotting import plot_pretrain_curves
    plot_pretrain_curves(rows, run.file("loss_curve.png"), SMOOTHING_WINDOW)
    run.finish()
    return run


def pretrain_report(rows, params, triples, pool, vocab, config, seed: int) -> dict:
    report: dict = {"steps": len(rows)}
    if rows:
        mtl = smoothed([r["mtl"] for r in rows], SMOOTHING_WINDOW)
        report.update({"final_loss": rows[-1]["loss"], "mtl_first": rows[0]["mtl"],
                       "mtl_smoothed_final": float(mtl[-1]),
                       "mtl_reduction": float(1.0 - mtl[-1] / rows[0]["mtl"]) if rows[0]["mtl"] > 0 else 0.0,
                       "cl3_batch_acc_smoothed_final": float(smoothed([r["cl3_acc"] for r in rows],
                                                                      SMOOTHING_WINDOW)[-1])})
    report["contrastive_train_accuracy"] = contrastive_accuracy(params, triples, pool, vocab, config,
                                                                seed=seed + 1)
    return report


# ----------------------------------------------------------------------------
# finetune / evaluate / caption
# ----------------------------------------------------------------------------

def _task_settings(cfg: PipelineConfig) -> FinetuneSettings:
    f = cfg.finetune
    return FinetuneSettings(f.steps, f.batch_size, f.lr, cfg.seed)


def _load_task(cfg: PipelineConfig, task: str, corpus: Corpus):
    if task not in TASK_NAMES:
        raise ValueError(f"unknown task {task!r}; expected one of {', '.join(TASK_NAMES)}")
    c = cfg.caption
    return load_task(task, corpus.task_records(task), corpus.regions_for, corpus.vocab, cfg.finetune.eval_fraction,
                     cfg.seed, c.beam_size, c.max_len, c.n_images)


def _start_params(cfg: PipelineConfig, corpus: Corpus, checkpoint: str | Path | None):
    if checkpoint is None:
        config = model_config_for(cfg, corpus.vocab)
        return new_pretrain_model(config, cfg.seed), config
    params, config, _, _ = load_checkpoint(checkpoint)
    if config.vocab_size != len(corpus.vocab):
        raise DataInvariantError(f"{checkpoint}: vocabulary size {config.vocab_size} != corpus {len(corpus.vocab)}")
    return params, config


def finetune(cfg: PipelineConfig, task: str, corpus_dir: str | Path, out: str | Path,
             checkpoint: str | Path | None = None) -> RunDir:
    run = RunDir(out, f"finetune {task}", cfg, {"seed": cfg.seed})
    corpus = Corpus.load(run.add_input("corpus", corpus_dir), cfg.regions.normalize_positions)
    if checkpoint is not None:
        run.add_input("checkpoint", checkpoint)
    data = _load_task(cfg, task, corpus)
    params, config = _start_params(cfg, corpus, checkpoint)
    data.init_head(params, config, np.random.default_rng([cfg.seed, 0xF1]))
    settings = _task_settings(cfg)
    rows = train_loop(params, data.batch_loss(params, corpus.vocab, config, settings), settings)
    save_checkpoint(run.file("checkpoint.npz"), params, config, {"kind": "finetune", "task": task})
    write_tsv(run.file("metrics.tsv"), rows, ["step", "loss"])
    metrics = data.evaluate(params, corpus.vocab, config)
    write_kv(run.file("report.txt"), {"task": task, "steps": len(rows),
                                      "final_loss": rows[-1]["loss"] if rows else float("nan"), **metrics})
    if task == "caption":
        write_tsv(run.file("captions.tsv"), [{"image_id": i, "reference": r, "generated": g}
                                             for i, r, g in data.samples])
    from .plotting import plot_finetune_curve
    plot_finetune_curve(rows, run.file("loss_curve.png"), task, SMOOTHING_WINDOW)
    run.finish()
    return run


def evaluate(cfg: PipelineConfig, task: str, corpus_dir: str | Path, checkpoint: str | Path,
             out: str | Path) -> RunDir:
    run = RunDir(out, f"evaluate {task}", cfg, {"seed": cfg.seed})
    corpus = Corpus.load(run.add_input("corpus", corpus_dir), cfg.regions.normalize_positions)
    params, config, extra, _ = load_checkpoint(run.add_input("checkpoint", checkpoint))
    if extra.get("task") not in (None, task):
        raise DataInvariantError(f"{checkpoint}: checkpoint was fine-tuned for {extra['task']!r}, not {task!r}")
    data = _load_task(cfg, task, corpus)
    metrics = data.evaluate(params, corpus.vocab, config)
    write_kv(run.file("report.txt"), {"task": task, **metrics})
    run.finish()
    return run


def caption(cfg: PipelineConfig, corpus_dir: str | Path, checkpoint: str | Path, out: str | Path) -> RunDir:
    run = RunDir(out, "caption", cfg, {"seed": cfg.seed})
    corpus = Corpus.load(run.add_input("corpus", corpus_dir), cfg.regions.normalize_positions)
    params, config, _, _ = load_checkpoint(run.add_input("checkpoint", checkpoint))
    data = _load_task(cfg, "caption", corpus)
    examples = (data.eval or data.train)[:cfg.caption.n_images]
    gen = data.generate(params, corpus.vocab, config, examples)
    write_tsv(run.file("captions.tsv"), [{"image_id": i, "reference": r, "generated": g} for i, r, g in gen])
    run.finish()
    return run


# ----------------------------------------------------------------------------
# bench-nms
# ----------------------------------------------------------------------------

def bench_nms_run(cfg: PipelineConfig, out: str | Path, n_boxes: int = 2000, n_classes: int = 1848,
                  trials: int = 3) -> RunDir:
    run = RunDir(out, "bench-nms", cfg, {"seed": cfg.seed})
    report = bench_nms(n_boxes, n_classes, trials, cfg.seed)
    run.file("nms_bench.tsv").write_text(report.table(), encoding="utf-8")
    from .plotting import plot_nms_bench
    plot_nms_bench(report, run.file("nms_bench.png"))
    run.finish()
    return run
