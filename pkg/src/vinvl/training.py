"""Pre-training loop and contrastive evaluation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import ModelConfig, Params, TokenVocab, collate, forward, init_params
from .objectives import (DEFAULT_MASK_PROB, PollutionPool, PretrainExample, Triple, cl3_logits,
                         init_pretrain_heads, prepare_example, pretraining_loss)
from .tensor import Adam


@dataclass
class PretrainSettings:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    mask_prob: float = DEFAULT_MASK_PROB
    seed: int = 0
    mtl_on_polluted: bool = False


def new_pretrain_model(config: ModelConfig, seed: int) -> Params:
    rng = np.random.default_rng([seed, 0x1417])
    params = init_params(config, rng)
    init_pretrain_heads(params, config, rng)
    return params


def step_examples(triples: Sequence[Triple], pool: PollutionPool, vocab: TokenVocab, config: ModelConfig,
                  settings: PretrainSettings, step: int) -> list[PretrainExample]:
    """The examples of one step depend only on ``(seed, step)``, so runs can resume."""
    rng = np.random.default_rng([settings.seed, step, 2])
    idx = rng.integers(0, len(triples), size=settings.batch_size)
    base = step * settings.batch_size
    return [prepare_example(triples[i], pool, vocab, config, settings.seed, base + j, settings.mask_prob)
            for j, i in enumerate(idx)]


def pretrain_steps(params: Params, opt: Adam, triples: Sequence[Triple], pool: PollutionPool, vocab: TokenVocab,
                   config: ModelConfig, settings: PretrainSettings, start: int = 0, stop: int | None = None,
                   on_step: Callable[[int, dict], None] | None = None) -> list[dict]:
    """Run optimiser steps ``start .. stop-1`` and return one metrics row per step."""
    stop = settings.steps if stop is None else stop
    rows = []
    for step in range(start, stop):
        examples = step_examples(triples, pool, vocab, config, settings, step)
        out = pretraining_loss(params, examples, vocab, config, settings.mtl_on_polluted)
        opt.zero_grad()
        out.total.backward()
        opt.step()
        acc = float(np.mean(out.cl3_logits.data.argmax(axis=1) == out.labels))
        row = {"step": step + 1, "loss": out.total.item(), "mtl": out.mtl.item(), "cl3": out.cl3.item(),
               "cl3_acc": acc, "n_masked": out.n_masked}
        rows.append(row)
        if on_step is not None:
            on_step(step + 1, row)
    return rows


def contrastive_accuracy(params: Params, triples: Sequence[Triple], pool: PollutionPool, vocab: TokenVocab,
                         config: ModelConfig, seed: int, batch_size: int = 64) -> float:
    """3-way accuracy on unmasked, seeded pollutions of ``triples``."""
    examples = [prepare_example(t, pool, vocab, config, seed, i, mask_prob=0.0) for i, t in enumerate(triples)]
    correct = 0
    for s in range(0, len(examples), batch_size):
        chunk = examples[s:s + batch_size]
        batch = collate([e.triple.sequence() for e in chunk], vocab, config)
        _, cls = forward(params, batch, config)
        pred = cl3_logits(params, cls).data.argmax(axis=1)
        correct += int(np.sum(pred == np.array([e.triple.label for e in chunk])))
    return correct / max(len(examples), 1)


def smoothed(values: Sequence[float], window: int = 20) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    n = np.minimum(np.arange(1, len(v) + 1), window)
    return (c[1:] - c[np.arange(1, len(v) + 1) - n]) / n
