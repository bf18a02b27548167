"""Task heads on top of the fusion encoder, plus beam-search decoding.

VQA/GQA share one answer-classification head, retrieval is binary
match/no-match scoring, NLVR2 classifies the concatenation of two [CLS]
vectors, and captioning decodes under the seq2seq attention mask.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import (InputSequence, ModelConfig, Params, TokenVocab, add_linear, collate, forward, gather_rows,
                    linear, mlm_logits)
from .objectives import mask_tokens
from .tensor import Tensor, bce_with_logits, concat, cross_entropy_from_logits, gelu

CAPTION_MASK_PROB = 0.15
DEFAULT_BEAM_SIZE = 5


# ----------------------------------------------------------------------------
# VQA / GQA
# ----------------------------------------------------------------------------

@dataclass
class AnswerSpace:
    answers: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.answers = list(self.answers)
        if len(set(self.answers)) != len(self.answers):
            raise ValueError("answers must be unique")
        self.index = {a: i for i, a in enumerate(self.answers)}

    def __len__(self) -> int:
        return len(self.answers)

    @classmethod
    def from_counts(cls, counts: Sequence[dict[str, int]]) -> AnswerSpace:
        return cls(sorted({a for c in counts for a in c}))

    def soft_target(self, counts: dict[str, int]) -> np.ndarray:
        """Per-answer relevance ``min(count / 3, 1)``; unknown answers are ignored."""
        t = np.zeros(len(self))
        for a, n in counts.items():
            if a in self.index:
                t[self.index[a]] = min(n / 3.0, 1.0)
        return t


def init_vqa_head(params: Params, config: ModelConfig, n_answers: int, rng: np.random.Generator) -> None:
    add_linear(params, "vqa", config.hidden, n_answers, rng, config.init_std)


def vqa_forward(params: Params, seqs: Sequence[InputSequence], vocab: TokenVocab, config: ModelConfig) -> Tensor:
    """Answer logits ``[B, |answers|]`` from the bidirectional [CLS] vector."""
    _, cls = forward(params, collate(seqs, vocab, config), config)
    return linear(params, "vqa", cls)


def vqa_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean per-answer sigmoid cross-entropy against soft targets."""
    return bce_with_logits(logits, np.asarray(targets, dtype=np.float64).reshape(logits.shape))


def vqa_predict(logits: Tensor | np.ndarray) -> np.ndarray:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
    return p.argmax(axis=-1)


def vqa_soft_accuracy(predicted: str, human_counts: dict[str, int]) -> float:
    return min(human_counts.get(predicted, 0) / 3.0, 1.0)


# ----------------------------------------------------------------------------
# retrieval
# ----------------------------------------------------------------------------

def init_retrieval_head(params: Params, config: ModelConfig, rng: np.random.Generator) -> None:
    add_linear(params, "retrieval", config.hidden, 1, rng, config.init_std)


def retrieval_logits(params: Params, seqs: Sequence[InputSequence], vocab: TokenVocab, config: ModelConfig) -> Tensor:
    _, cls = forward(params, collate(seqs, vocab, config), config)
    return linear(params, "retrieval", cls)


def retrieval_score(params: Params, seqs: Sequence[InputSequence], vocab: TokenVocab,
                    config: ModelConfig) -> np.ndarray:
    """Match probabilities in (0, 1), one per sequence."""
    z = retrieval_logits(params, seqs, vocab, config).data[:, 0]
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sample_retrieval_pairs(n: int, rng: np.random.Generator) -> list[tuple[int, int, bool]]:
    """``(sentence, image, matched)`` triples: every matched pair plus one unmatched
    pair that swaps in a different image or a different sentence."""
    if n < 2:
        raise ValueError("need at least two pairs to form unmatched pairs")
    out = []
    for i in range(n):
        out.append((i, i, True))
        j = (i + 1 + int(rng.integers(n - 1))) % n
        out.append((i, j, False) if rng.random() < 0.5 else (j, i, False))
    return out


def recall_at_k(scores: np.ndarray, ground_truth: Sequence[int], k: int) -> float:
    """Fraction of queries whose true target ranks in the top ``k``.

    Higher scores rank first; equal scores rank by target index.
    """
    s = np.asarray(scores, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.int64)
    if s.ndim != 2 or len(gt) != s.shape[0]:
        raise ValueError("scores must be [n_query, n_target] with one ground truth per query")
    if k < 1:
        raise ValueError("k must be >= 1")
    own = s[np.arange(len(gt)), gt][:, None]
    cols = np.arange(s.shape[1])[None, :]
    rank = np.sum((s > own) | ((s == own) & (cols < gt[:, None])), axis=1)
    return float(np.mean(rank < k))


# ----------------------------------------------------------------------------
# NLVR2
# ----------------------------------------------------------------------------

def init_nlvr2_head(params: Params, config: ModelConfig, rng: np.random.Generator) -> None:
    add_linear(params, "nlvr2.hidden", 2 * config.hidden, config.hidden, rng, config.init_std)
    add_linear(params, "nlvr2.out", config.hidden, 2, rng, config.init_std)


def nlvr2_forward(params: Params, left: Sequence[InputSequence], right: Sequence[InputSequence],
                  vocab: TokenVocab, config: ModelConfig) -> Tensor:
    """Binary logits ``[B, 2]`` from two independent encoder passes."""
    _, cls_a = forward(params, collate(left, vocab, config), config)
    _, cls_b = forward(params, collate(right, vocab, config), config)
    h = gelu(linear(params, "nlvr2.hidden", concat([cls_a, cls_b], axis=1)))
    return linear(params, "nlvr2.out", h)


# ----------------------------------------------------------------------------
# decoding
# ----------------------------------------------------------------------------

StepFn = Callable[[list[tuple[int, ...]]], np.ndarray]


@dataclass(frozen=True)
class Beam:
    tokens: tuple[int, ...]
    log_prob: float
    finished: bool = False


def _rank_key(score: float, beam_rank: int, token: int) -> tuple:
    return (-score, beam_rank, token)


def greedy_decode(step_fn: StepFn, stop_id: int, max_len: int) -> Beam:
    """Repeatedly take the most probable next token (lowest id on ties)."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    tokens: tuple[int, ...] = ()
    total = 0.0
    for _ in range(max_len):
        lp = np.asarray(step_fn([tokens]))[0]
        tok = int(np.argmax(lp))
        total += float(lp[tok])
        if tok == stop_id:
            return Beam(tokens, total, True)
        tokens += (tok,)
    return Beam(tokens, total, True)


def beam_search(step_fn: StepFn, stop_id: int, max_len: int, beam_size: int = DEFAULT_BEAM_SIZE,
                length_penalty: float = 0.0, return_all: bool = False):
    """Keep the ``beam_size`` best extensions by cumulative log-probability.

    ``step_fn`` maps a list of prefixes to next-token log-probabilities
    ``[n_prefix, V]``.  An extension ending in ``stop_id`` is finished and
    frozen (the terminator is not part of its tokens); hypotheses reaching
    ``max_len`` tokens are finished too.  With ``length_penalty`` 0 finished
    hypotheses are compared by raw log-probability.
    """
    if beam_size < 1 or max_len < 1:
        raise ValueError("beam_size and max_len must be >= 1")

    def final_score(b: Beam) -> float:
        return b.log_prob / (max(len(b.tokens), 1) ** length_penalty) if length_penalty else b.log_prob

    live = [Beam((), 0.0)]
    done: list[Beam] = []
    history: list[list[float]] = []
    for t in range(max_len):
        lp = np.asarray(step_fn([b.tokens for b in live]), dtype=np.float64)
        cands = []
        for r, b in enumerate(live):
            for tok in range(lp.shape[1]):
                if np.isfinite(lp[r, tok]):
                    cands.append((_rank_key(b.log_prob + lp[r, tok], r, tok), b, tok))
        cands.sort(key=lambda c: c[0])
        chosen = cands[:beam_size]
        history.append([-c[0][0] for c in chosen])
        live = []
        for (neg, _, _), b, tok in chosen:
            if tok == stop_id:
                done.append(Beam(b.tokens, -neg, True))
            elif t == max_len - 1:
                done.append(Beam(b.tokens + (tok,), -neg, True))
            else:
                live.append(Beam(b.tokens + (tok,), -neg))
        if not live:
            break
        # log-probabilities only fall, so no live hypothesis can overtake
        if not length_penalty and done and max(d.log_prob for d in done) >= live[0].log_prob:
            break
    done.sort(key=lambda b: (-final_score(b), b.tokens))
    best = done[0] if done else max(live, key=final_score)
    return (best, done, history) if return_all else best


def exhaustive_decode(step_fn: StepFn, stop_id: int, max_len: int, vocab_size: int) -> Beam:
    """Best complete sequence over every token string of length <= ``max_len``."""
    best: Beam | None = None
    frontier = [Beam((), 0.0)]
    for t in range(max_len):
        lp = np.asarray(step_fn([b.tokens for b in frontier]), dtype=np.float64)
        nxt = []
        for r, b in enumerate(frontier):
            for tok in range(vocab_size):
                s = b.log_prob + lp[r, tok]
                if tok == stop_id:
                    cand = Beam(b.tokens, s, True)
                elif t == max_len - 1:
                    cand = Beam(b.tokens + (tok,), s, True)
                else:
                    nxt.append(Beam(b.tokens + (tok,), s))
                    continue
                if best is None or (-cand.log_prob, cand.tokens) < (-best.log_prob, best.tokens):
                    best = cand
        frontier = nxt
    return best


# ----------------------------------------------------------------------------
# captioning
# ----------------------------------------------------------------------------

def caption_step_fn(params: Params, tags: Sequence[int], regions: np.ndarray, vocab: TokenVocab,
                    config: ModelConfig) -> StepFn:
    """Next-token log-probabilities read at a trailing [MASK] under the seq2seq mask.

    Only ordinary words and [SEP] (the terminator) can be produced.
    """
    banned = sorted(vocab.special_ids() - {vocab.sep_id})

    def step(prefixes: list[tuple[int, ...]]) -> np.ndarray:
        seqs = [InputSequence([*p, vocab.mask_id], list(tags), regions) for p in prefixes]
        batch = collate(seqs, vocab, config, "seq2seq")
        hidden, _ = forward(params, batch, config)
        pos = np.array([len(p) + 1 for p in prefixes])
        logits = mlm_logits(params, gather_rows(hidden, np.arange(len(prefixes)), pos)).data.copy()
        logits[:, banned] = -np.inf
        m = logits.max(axis=1, keepdims=True)
        return logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))

    return step


def generate_caption(params: Params, tags: Sequence[int], regions: np.ndarray, vocab: TokenVocab,
                     config: ModelConfig, beam_size: int = DEFAULT_BEAM_SIZE, max_len: int = 20) -> list[int]:
    """Caption token ids (terminator excluded)."""
    max_len = min(max_len, config.max_text_len - len(tags) - 1)
    step = caption_step_fn(params, tags, regions, vocab, config)
    if beam_size == 1:
        return list(greedy_decode(step, vocab.sep_id, max_len).tokens)
    return list(beam_search(step, vocab.sep_id, max_len, beam_size).tokens)


def caption_masking(seq: InputSequence, vocab: TokenVocab, rng_seed, mask_prob: float = CAPTION_MASK_PROB):
    """Mask caption positions and the [SEP] that ends the caption, so stopping is learned."""
    ids = seq.text_ids(vocab)
    eligible = [0 < i <= len(seq.w) + 1 for i in range(len(ids))]
    never = vocab.special_ids() - {vocab.sep_id}
    return mask_tokens(ids, mask_prob, rng_seed, never, vocab.mask_id, eligible)


def caption_loss(params: Params, seqs: Sequence[InputSequence], vocab: TokenVocab, config: ModelConfig,
                 seeds: Sequence, mask_prob: float = CAPTION_MASK_PROB) -> tuple[Tensor, int]:
    """Masked-token loss on caption positions under the seq2seq mask, and the masked count."""
    seqs = [s.truncated(config) for s in seqs]
    masked = [caption_masking(s, vocab, seed, mask_prob) for s, seed in zip(seqs, seeds)]
    bi = [b for b, m in enumerate(masked) for _ in m.positions]
    pi = [p for m in masked for p in m.positions]
    orig = [o for m in masked for o in m.originals]
    if not orig:
        return Tensor(0.0), 0
    batch = collate(seqs, vocab, config, "seq2seq", [m.ids for m in masked])
    hidden, _ = forward(params, batch, config)
    logits = mlm_logits(params, gather_rows(hidden, np.array(bi), np.array(pi)))
    return cross_entropy_from_logits(logits, orig), len(orig)


def caption_train_step(params: Params, seq: InputSequence, vocab: TokenVocab, config: ModelConfig,
                       rng_seed=0, mask_prob: float = CAPTION_MASK_PROB) -> Tensor:
    """Single-example caption loss; zero when no caption token is masked."""
    return caption_loss(params, [seq], vocab, config, [rng_seed], mask_prob)[0]


def sequence_log_prob(step_fn: StepFn, tokens: Sequence[int], stop_id: int) -> float:
    """Log-probability of ``tokens`` followed by the terminator."""
    total, prefix = 0.0, ()
    for tok in [*tokens, stop_id]:
        total += float(np.asarray(step_fn([prefix]))[0, tok])
        prefix += (tok,)
    return total


__all__ = [
    "AnswerSpace", "Beam", "beam_search", "caption_loss", "caption_step_fn", "caption_train_step",
    "exhaustive_decode", "generate_caption", "greedy_decode", "init_nlvr2_head", "init_retrieval_head",
    "init_vqa_head", "nlvr2_forward", "recall_at_k", "retrieval_logits", "retrieval_score",
    "sample_retrieval_pairs", "sequence_log_prob", "vqa_forward", "vqa_loss", "vqa_predict", "vqa_soft_accuracy",
]
