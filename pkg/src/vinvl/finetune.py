"""Fine-tuning and evaluation loops for the downstream tasks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .heads import (AnswerSpace, caption_loss, generate_caption, init_nlvr2_head, init_retrieval_head,
                    init_vqa_head, nlvr2_forward, recall_at_k, retrieval_logits, retrieval_score,
                    sample_retrieval_pairs, vqa_forward, vqa_loss, vqa_predict, vqa_soft_accuracy)
from .model import InputSequence, ModelConfig, Params, TokenVocab, tokenize
from .tensor import Adam, Tensor, bce_with_logits, cross_entropy_from_logits

TASK_NAMES = ("vqa", "gqa", "retrieval", "nlvr2", "caption")
RECALL_KS = (1, 5, 10)


class TaskDataError(ValueError):
    pass


@dataclass
class FinetuneSettings:
    steps: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0


RegionLookup = Callable[[str], np.ndarray]


def split_by_image(image_ids: Sequence[str], eval_fraction: float) -> tuple[set[str], set[str]]:
    """Deterministic split: the last ``eval_fraction`` of the sorted image ids are held out."""
    ids = sorted(set(image_ids))
    n_eval = int(round(len(ids) * eval_fraction))
    if len(ids) > 1:
        n_eval = min(max(n_eval, 1), len(ids) - 1) if eval_fraction > 0 else 0
    return set(ids[:len(ids) - n_eval]), set(ids[len(ids) - n_eval:])


def train_loop(params: Params, batch_loss: Callable[[int], Tensor], settings: FinetuneSettings,
               on_step: Callable[[int, dict], None] | None = None) -> list[dict]:
    """Adam on ``batch_loss(step)``; every parameter in ``params`` is trained."""
    opt = Adam(params.values(), lr=settings.lr)
    rows = []
    for step in range(settings.steps):
        loss = batch_loss(step)
        opt.zero_grad()
        if loss.requires_grad:
            loss.backward()
            opt.step()
        row = {"step": step + 1, "loss": loss.item()}
        rows.append(row)
        if on_step is not None:
            on_step(step + 1, row)
    return rows


def _batch_indices(n: int, settings: FinetuneSettings, step: int) -> np.ndarray:
    rng = np.random.default_rng([settings.seed, step, 3])
    return rng.integers(0, n, size=min(settings.batch_size, n))


# ----------------------------------------------------------------------------
# VQA / GQA
# ----------------------------------------------------------------------------

@dataclass
class VqaExample:
    seq: InputSequence
    counts: dict[str, int]
    image_id: str


@dataclass
class VqaTask:
    train: list[VqaExample]
    eval: list[VqaExample]
    answers: AnswerSpace

    @classmethod
    def from_records(cls, records: Sequence[dict], regions: RegionLookup, vocab: TokenVocab,
                     eval_fraction: float) -> VqaTask:
        if not records:
            raise TaskDataError("no question records")
        train_ids, _ = split_by_image([r["image_ref"] for r in records], eval_fraction)
        answers = AnswerSpace.from_counts([r["answers"] for r in records])
        train, held = [], []
        for r in records:
            ex = VqaExample(InputSequence(tokenize(r["question"], vocab), tokenize(r["tags"], vocab),
                                          regions(r["image_ref"])), dict(r["answers"]), r["image_ref"])
            (train if r["image_ref"] in train_ids else held).append(ex)
        return cls(train, held, answers)

    def init_head(self, params: Params, config: ModelConfig, rng: np.random.Generator) -> None:
        init_vqa_head(params, config, len(self.answers), rng)

    def batch_loss(self, params: Params, vocab: TokenVocab, config: ModelConfig,
                   settings: FinetuneSettings) -> Callable[[int], Tensor]:
        def loss(step: int) -> Tensor:
            batch = [self.train[i] for i in _batch_indices(len(self.train), settings, step)]
            logits = vqa_forward(params, [e.seq for e in batch], vocab, config)
            return vqa_loss(logits, np.stack([self.answers.soft_target(e.counts) for e in batch]))
        return loss

    def predict(self, params: Params, vocab: TokenVocab, config: ModelConfig,
                examples: Sequence[VqaExample], chunk: int = 64) -> list[str]:
        out = []
        for s in range(0, len(examples), chunk):
            logits = vqa_forward(params, [e.seq for e in examples[s:s + chunk]], vocab, config)
            out.extend(self.answers.answers[i] for i in vqa_predict(logits))
        return out

    def evaluate(self, params: Params, vocab: TokenVocab, config: ModelConfig) -> dict[str, float]:
        out = {}
        for split, examples in (("train", self.train), ("eval", self.eval)):
            if not examples:
                continue
            preds = self.predict(params, vocab, config, examples)
            out[f"{split}_soft_accuracy"] = float(np.mean([vqa_soft_accuracy(p, e.counts)
                                                           for p, e in zip(preds, examples)]))
            out[f"{split}_questions"] = len(examples)
        return out


# ----------------------------------------------------------------------------
# retrieval
# ----------------------------------------------------------------------------

@dataclass
class RetrievalTask:
    """Sentence i describes image i; training mixes matched pairs 1:1 with unmatched ones."""

    sentences: list[list[int]]
    image_tags: list[list[int]]
    image_regions: list[np.ndarray]
    train_idx: list[int]
    eval_idx: list[int]
    seed: int = 0
    pairs: list[tuple[int, int, bool]] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: Sequence[dict], regions: RegionLookup, vocab: TokenVocab,
                     eval_fraction: float, seed: int = 0) -> RetrievalTask:
        matched = [r for r in records if r.get("matched", True)]
        if len(matched) < 2:
            raise TaskDataError("retrieval needs at least two matched sentence-image records")
        train_ids, _ = split_by_image([r["image_ref"] for r in matched], eval_fraction)
        task = cls([tokenize(r["sentence"], vocab) for r in matched], [tokenize(r["tags"], vocab) for r in matched],
                   [regions(r["image_ref"]) for r in matched],
                   [i for i, r in enumerate(matched) if r["image_ref"] in train_ids],
                   [i for i, r in enumerate(matched) if r["image_ref"] not in train_ids], seed)
        local = sample_retrieval_pairs(len(task.train_idx), np.random.default_rng([seed, 0x5E]))
        task.pairs = [(task.train_idx[s], task.train_idx[i], m) for s, i, m in local]
        return task

    def sequence(self, sentence: int, image: int) -> InputSequence:
        return InputSequence(self.sentences[sentence], self.image_tags[image], self.image_regions[image])

    def init_head(self, params: Params, config: ModelConfig, rng: np.random.Generator) -> None:
        init_retrieval_head(params, config, rng)

    def batch_loss(self, params: Params, vocab: TokenVocab, config: ModelConfig,
                   settings: FinetuneSettings) -> Callable[[int], Tensor]:
        def loss(step: int) -> Tensor:
            batch = [self.pairs[i] for i in _batch_indices(len(self.pairs), settings, step)]
            logits = retrieval_logits(params, [self.sequence(s, i) for s, i, _ in batch], vocab, config)
            return bce_with_logits(logits, np.array([[float(m)] for _, _, m in batch]))
        return loss

    def score_matrix(self, params: Params, vocab: TokenVocab, config: ModelConfig,
                     idx: Sequence[int]) -> np.ndarray:
        """Match probability of every (sentence, image) pair within ``idx``."""
        seqs = [self.sequence(s, i) for s in idx for i in idx]
        scores = np.concatenate([retrieval_score(params, seqs[c:c + 64], vocab, config)
                                 for c in range(0, len(seqs), 64)]) if seqs else np.zeros(0)
        return scores.reshape(len(idx), len(idx))

    def evaluate(self, params: Params, vocab: TokenVocab, config: ModelConfig,
                 max_images: int = 20) -> dict[str, float]:
        out = {}
        for split, idx in (("train", self.train_idx[:max_images]), ("eval", self.eval_idx[:max_images])):
            if len(idx) < 2:
                continue
            s = self.score_matrix(params, vocab, config, idx)
            for k in RECALL_KS:
                if k <= len(idx):
                    out[f"{split}_text_to_image_r@{k}"] = recall_at_k(s, list(range(len(idx))), k)
                    out[f"{split}_image_to_text_r@{k}"] = recall_at_k(s.T, list(range(len(idx))), k)
            out[f"{split}_images"] = len(idx)
        return out


# ----------------------------------------------------------------------------
# NLVR2
# ----------------------------------------------------------------------------

@dataclass
class Nlvr2Example:
    left: InputSequence
    right: InputSequence
    label: int


@dataclass
class Nlvr2Task:
    train: list[Nlvr2Example]
    eval: list[Nlvr2Example]

    @classmethod
    def from_records(cls, records: Sequence[dict], regions: RegionLookup, vocab: TokenVocab,
                     eval_fraction: float) -> Nlvr2Task:
        if not records:
            raise TaskDataError("no statement records")
        train_ids, _ = split_by_image([r["image_ref_pair"][0] for r in records], eval_fraction)
        train, held = [], []
        for r in records:
            w = tokenize(r["statement"], vocab)
            (a, b), (ta, tb) = r["image_ref_pair"], r["tags_pair"]
            ex = Nlvr2Example(InputSequence(w, tokenize(ta, vocab), regions(a)),
                              InputSequence(w, tokenize(tb, vocab), regions(b)), int(bool(r["label"])))
            (train if a in train_ids else held).append(ex)
        return cls(train, held)

    def init_head(self, params: Params, config: ModelConfig, rng: np.random.Generator) -> None:
        init_nlvr2_head(params, config, rng)

    def batch_loss(self, params: Params, vocab: TokenVocab, config: ModelConfig,
                   settings: FinetuneSettings) -> Callable[[int], Tensor]:
        def loss(step: int) -> Tensor:
            batch = [self.train[i] for i in _batch_indices(len(self.train), settings, step)]
            logits = nlvr2_forward(params, [e.left for e in batch], [e.right for e in batch], vocab, config)
            return cross_entropy_from_logits(logits, [e.label for e in batch])
        return loss

    def evaluate(self, params: Params, vocab: TokenVocab, config: ModelConfig) -> dict[str, float]:
        out = {}
        for split, examples in (("train", self.train), ("eval", self.eval)):
            if not examples:
                continue
            correct = 0
            for s in range(0, len(examples), 64):
                chunk = examples[s:s + 64]
                logits = nlvr2_forward(params, [e.left for e in chunk], [e.right for e in chunk], vocab, config)
                correct += int(np.sum(logits.data.argmax(axis=1) == [e.label for e in chunk]))
            out[f"{split}_accuracy"] = correct / len(examples)
            out[f"{split}_statements"] = len(examples)
        return out


# ----------------------------------------------------------------------------
# captioning
# ----------------------------------------------------------------------------

@dataclass
class CaptionExample:
    seq: InputSequence
    image_id: str


@dataclass
class CaptionTask:
    train: list[CaptionExample]
    eval: list[CaptionExample]
    beam_size: int = 5
    max_len: int = 20
    n_generate: int = 10
    samples: list[tuple[str, str, str]] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: Sequence[dict], regions: RegionLookup, vocab: TokenVocab,
                     eval_fraction: float, beam_size: int = 5, max_len: int = 20,
                     n_generate: int = 10) -> CaptionTask:
        if not records:
            raise TaskDataError("no caption records")
        train_ids, _ = split_by_image([r["image_ref"] for r in records], eval_fraction)
        train, held = [], []
        for r in records:
            ex = CaptionExample(InputSequence(tokenize(r["caption"], vocab), tokenize(r["tags"], vocab),
                                              regions(r["image_ref"])), r["image_ref"])
            (train if r["image_ref"] in train_ids else held).append(ex)
        return cls(train, held, beam_size, max_len, n_generate)

    def init_head(self, params: Params, config: ModelConfig, rng: np.random.Generator) -> None:
        """Captioning reuses the masked-token projection; there is no new head."""

    def batch_loss(self, params: Params, vocab: TokenVocab, config: ModelConfig,
                   settings: FinetuneSettings) -> Callable[[int], Tensor]:
        def loss(step: int) -> Tensor:
            idx = _batch_indices(len(self.train), settings, step)
            seeds = [(settings.seed, step, j) for j in range(len(idx))]
            return caption_loss(params, [self.train[i].seq for i in idx], vocab, config, seeds)[0]
        return loss

    def generate(self, params: Params, vocab: TokenVocab, config: ModelConfig,
                 examples: Sequence[CaptionExample]) -> list[tuple[str, str, str]]:
        """``(image_id, reference, generated)`` for each example."""
        out = []
        for e in examples:
            ids = generate_caption(params, e.seq.q, e.seq.regions, vocab, config, self.beam_size, self.max_len)
            out.append((e.image_id, vocab.decode(e.seq.w), vocab.decode(ids)))
        return out

    def evaluate(self, params: Params, vocab: TokenVocab, config: ModelConfig) -> dict[str, float]:
        out = {}
        self.samples = []
        for split, examples in (("train", self.train), ("eval", self.eval)):
            if not examples:
                continue
            gen = self.generate(params, vocab, config, examples[:self.n_generate])
            self.samples.extend(gen)
            out[f"{split}_exact_match"] = float(np.mean([ref == hyp for _, ref, hyp in gen]))
            out[f"{split}_token_f1"] = float(np.mean([token_f1(ref, hyp) for _, ref, hyp in gen]))
            out[f"{split}_generated"] = len(gen)
        return out


def token_f1(reference: str, hypothesis: str) -> float:
    """Bag-of-tokens F1 between two whitespace-tokenised strings."""
    ref, hyp = reference.split(), hypothesis.split()
    if not ref or not hyp:
        return float(ref == hyp)
    common = sum(min(ref.count(t), hyp.count(t)) for t in set(hyp))
    if common == 0:
        return 0.0
    p, r = common / len(hyp), common / len(ref)
    return 2 * p * r / (p + r)


def load_task(task: str, records: Sequence[dict], regions: RegionLookup, vocab: TokenVocab,
              eval_fraction: float, seed: int = 0, beam_size: int = 5, max_len: int = 20, n_generate: int = 10):
    if task in ("vqa", "gqa"):
        return VqaTask.from_records(records, regions, vocab, eval_fraction)
    if task == "retrieval":
        return RetrievalTask.from_records(records, regions, vocab, eval_fraction, seed)
    if task == "nlvr2":
        return Nlvr2Task.from_records(records, regions, vocab, eval_fraction)
    if task == "caption":
        return CaptionTask.from_records(records, regions, vocab, eval_fraction, beam_size, max_len, n_generate)
    raise ValueError(f"unknown task {task!r}; expected one of {', '.join(TASK_NAMES)}")
