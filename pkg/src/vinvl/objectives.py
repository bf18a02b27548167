"""Pre-training losses: masked token loss plus the 3-way contrastive loss."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .model import (Batch, InputSequence, ModelConfig, Params, TokenVocab, add_linear, collate, forward,
                    gather_rows, linear, mlm_logits)
from .tensor import Tensor, cross_entropy_from_logits

MATCHED, W_POLLUTED, Q_POLLUTED = 0, 1, 2
DEFAULT_MASK_PROB = 0.15
# matched / w-polluted / q-polluted
POLLUTION_SPLIT = (0.5, 0.25, 0.25)
_MAX_REDRAWS = 64


class PollutionError(ValueError):
    pass


@dataclass
class Triple:
    """Text ``w``, tags-or-answer ``q``, regions ``v`` and the contrast label."""

    w: tuple[int, ...]
    q: tuple[int, ...]
    regions: np.ndarray
    label: int = MATCHED
    kind: str = "caption"
    id: str = ""

    def __post_init__(self):
        self.w, self.q = tuple(self.w), tuple(self.q)
        if self.label not in (MATCHED, W_POLLUTED, Q_POLLUTED):
            raise ValueError(f"contrast label must be 0, 1 or 2, got {self.label}")

    def sequence(self) -> InputSequence:
        return InputSequence(list(self.w), list(self.q), self.regions)


@dataclass
class PollutionPool:
    all_w: list[tuple[int, ...]] = field(default_factory=list)
    all_q: list[tuple[int, ...]] = field(default_factory=list)

    @classmethod
    def from_triples(cls, triples: Sequence[Triple]) -> PollutionPool:
        return cls([t.w for t in triples], [t.q for t in triples])


@dataclass
class MaskedTokens:
    ids: list[int]
    positions: list[int]
    originals: list[int]

    def restore(self) -> list[int]:
        out = list(self.ids)
        for p, o in zip(self.positions, self.originals):
            out[p] = o
        return out


def mask_tokens(h: Sequence[int], mask_prob: float = DEFAULT_MASK_PROB, rng_seed=0,
                special_ids: set[int] = frozenset(), mask_id: int = 3,
                eligible: Sequence[bool] | None = None) -> MaskedTokens:
    """Independently replace each eligible token by ``mask_id`` with probability ``mask_prob``.

    Special tokens are never eligible.  ``rng_seed`` may be an int, a sequence
    of ints (e.g. ``(global_seed, example_index)``) or a ``Generator``.
    """
    if not 0.0 <= mask_prob <= 1.0:
        raise ValueError(f"mask_prob must lie in [0, 1], got {mask_prob}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    draws = rng.random(len(h))
    ids = list(h)
    positions, originals = [], []
    for i, tok in enumerate(h):
        if tok in special_ids or (eligible is not None and not eligible[i]):
            continue
        if draws[i] < mask_prob:
            positions.append(i)
            originals.append(tok)
            ids[i] = mask_id
    return MaskedTokens(ids, positions, originals)


def mtl_loss(logits: Tensor | None, originals: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of the original ids; zero when nothing is masked."""
    if len(originals) == 0:
        return Tensor(0.0)
    return cross_entropy_from_logits(logits, originals)


def _draw_other(pool: Sequence[tuple[int, ...]], original: tuple[int, ...], rng: np.random.Generator):
    if not pool:
        raise PollutionError("pollution pool is empty")
    for _ in range(_MAX_REDRAWS):
        cand = pool[int(rng.integers(len(pool)))]
        if cand != original:
            return cand
    alternatives = [c for c in pool if c != original]
    if not alternatives:
        raise PollutionError("pollution pool holds nothing but the original")
    return alternatives[int(rng.integers(len(alternatives)))]


def pollute(triple: Triple, pool: PollutionPool, rng_seed=0) -> Triple:
    """Keep (50%), replace ``w`` (25%) or replace ``q`` (25%) with a different pool draw."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    u = rng.random()
    if u < POLLUTION_SPLIT[0]:
        return triple
    if u < POLLUTION_SPLIT[0] + POLLUTION_SPLIT[1]:
        return replace(triple, w=_draw_other(pool.all_w, triple.w, rng), label=W_POLLUTED)
    return replace(triple, q=_draw_other(pool.all_q, triple.q, rng), label=Q_POLLUTED)


def cl3_logits(params: Params, cls_vectors: Tensor) -> Tensor:
    return linear(params, "cl3", cls_vectors)


def cl3_loss(cls_vectors: Tensor, labels: Sequence[int], params: Params) -> Tensor:
    """3-way softmax NLL of the [CLS] classifier."""
    return cross_entropy_from_logits(cl3_logits(params, cls_vectors), labels)


# ----------------------------------------------------------------------------
# batches
# ----------------------------------------------------------------------------

@dataclass
class PretrainExample:
    triple: Triple
    masked: MaskedTokens


def prepare_example(triple: Triple, pool: PollutionPool, vocab: TokenVocab, config: ModelConfig,
                    global_seed: int, example_index: int, mask_prob: float = DEFAULT_MASK_PROB) -> PretrainExample:
    """Pollute then mask one triple, seeded by ``(global_seed, example_index)``."""
    polluted = pollute(triple, pool, np.random.default_rng([global_seed, example_index, 0]))
    seq = polluted.sequence().truncated(config)
    masked = mask_tokens(seq.text_ids(vocab), mask_prob, np.random.default_rng([global_seed, example_index, 1]),
                         vocab.special_ids(), vocab.mask_id)
    return PretrainExample(polluted, masked)


@dataclass
class LossBreakdown:
    total: Tensor
    mtl: Tensor
    cl3: Tensor
    cl3_logits: Tensor
    labels: np.ndarray
    n_masked: int


def pretraining_loss(params: Params, examples: Sequence[PretrainExample], vocab: TokenVocab,
                     config: ModelConfig, mtl_on_polluted: bool = False) -> LossBreakdown:
    """Unweighted sum of the masked token loss and the 3-way contrastive loss.

    Masked tokens only count on matched triples unless ``mtl_on_polluted``.
    """
    seqs = [e.triple.sequence().truncated(config) for e in examples]
    batch: Batch = collate(seqs, vocab, config, "bidirectional", [e.masked.ids for e in examples])
    hidden, cls = forward(params, batch, config)
    labels = np.array([e.triple.label for e in examples], dtype=np.int64)
    logits3 = cl3_logits(params, cls)
    cl3 = cross_entropy_from_logits(logits3, labels)
    bi, pi, orig = [], [], []
    for b, e in enumerate(examples):
        if e.triple.label != MATCHED and not mtl_on_polluted:
            continue
        bi.extend([b] * len(e.masked.positions))
        pi.extend(e.masked.positions)
        orig.extend(e.masked.originals)
    if orig:
        mtl = mtl_loss(mlm_logits(params, gather_rows(hidden, np.array(bi), np.array(pi))), orig)
    else:
        mtl = mtl_loss(None, orig)
    return LossBreakdown(mtl + cl3, mtl, cl3, logits3, labels, len(orig))


def init_pretrain_heads(params: Params, config: ModelConfig, rng: np.random.Generator) -> None:
    add_linear(params, "cl3", config.hidden, 3, rng)
