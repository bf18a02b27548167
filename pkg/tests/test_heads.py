import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vinvl.heads import (CAPTION_MASK_PROB, DEFAULT_BEAM_SIZE, AnswerSpace, beam_search, caption_loss,
                         caption_masking, caption_step_fn, caption_train_step, exhaustive_decode,
                         generate_caption, greedy_decode, init_nlvr2_head, init_retrieval_head, init_vqa_head,
                         nlvr2_forward, recall_at_k, retrieval_logits, retrieval_score, sample_retrieval_pairs,
                         sequence_log_prob,
                         vqa_forward, vqa_loss, vqa_predict, vqa_soft_accuracy)
from vinvl.model import InputSequence, ModelConfig, TokenVocab, init_params
from vinvl.tensor import Adam, Tensor, bce_with_logits, cross_entropy_from_logits

VOCAB = TokenVocab(f"w{i}" for i in range(12))


def config(**kw):
    base = dict(layers=1, hidden=16, heads=2, ff_dim=32, vocab_size=len(VOCAB), appearance_dim=4,
                max_text_len=12, max_region_len=3)
    base.update(kw)
    return ModelConfig(**base)


def seqs(rng, n, cfg, n_r=2):
    return [InputSequence(rng.integers(5, len(VOCAB), 3), rng.integers(5, len(VOCAB), 2),
                          rng.standard_normal((n_r, cfg.region_dim))) for _ in range(n)]


def fit(params, loss_fn, steps, lr=0.01):
    opt = Adam(list(params.values()), lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        loss_fn().backward()
        opt.step()


def markov_step_fn(table):
    """Next-token log-probs depending only on the previous token (row 0 is the start state)."""
    logp = table - np.log(np.exp(table).sum(axis=1, keepdims=True))

    def step(prefixes):
        return np.stack([logp[0 if not p else p[-1] + 1] for p in prefixes])
    return step


class TestVqa:
    def test_answer_space_unique(self):
        with pytest.raises(ValueError):
            AnswerSpace(["red", "red"])

    def test_soft_target(self):
        space = AnswerSpace(["blue", "red", "green"])
        np.testing.assert_allclose(space.soft_target({"red": 2, "blue": 5, "pink": 1}), [1.0, 2 / 3, 0.0])

    @pytest.mark.parametrize("count,expected", [(0, 0.0), (1, 1 / 3), (2, 2 / 3), (3, 1.0), (10, 1.0)])
    def test_soft_accuracy(self, count, expected):
        assert vqa_soft_accuracy("red", {"red": count, "blue": 10 - count}) == pytest.approx(expected)

    @given(st.dictionaries(st.sampled_from(["a", "b", "c"]), st.integers(0, 10)), st.sampled_from(["a", "b", "z"]))
    def test_soft_accuracy_values(self, counts, pred):
        assert vqa_soft_accuracy(pred, counts) in (0.0, 1 / 3, 2 / 3, 1.0)

    def test_loss_closed_form(self):
        assert vqa_loss(Tensor([[0.0]]), [[1.0]]).item() == pytest.approx(math.log(2), rel=1e-14)

    def test_loss_aligned_targets_near_zero(self):
        assert vqa_loss(Tensor([[30.0, -30.0, -30.0]]), [[1.0, 0.0, 0.0]]).item() < 1e-12
        assert vqa_loss(Tensor([[-40.0, -40.0]]), [[0.0, 0.0]]).item() < 1e-12

    def test_forward_shape_and_determinism(self):
        cfg = config()
        rng = np.random.default_rng(0)
        params = init_params(cfg, rng)
        init_vqa_head(params, cfg, 2, rng)
        batch = seqs(rng, 3, cfg)
        a = vqa_forward(params, batch, VOCAB, cfg).data
        assert a.shape == (3, 2) and np.isfinite(a).all()
        np.testing.assert_array_equal(a, vqa_forward(params, batch, VOCAB, cfg).data)

    def test_predict_is_argmax(self):
        np.testing.assert_array_equal(vqa_predict(np.array([[0.1, 2.0, -1.0], [5.0, 5.0, 0.0]])), [1, 0])

    def test_overfit_twenty_questions(self):
        cfg = config()
        rng = np.random.default_rng(1)
        params = init_params(cfg, rng)
        init_vqa_head(params, cfg, 4, rng)
        data = seqs(rng, 20, cfg)
        answers = rng.integers(0, 4, 20)
        targets = np.eye(4)[answers]
        fit(params, lambda: vqa_loss(vqa_forward(params, data, VOCAB, cfg), targets), 150)
        pred = vqa_predict(vqa_forward(params, data, VOCAB, cfg))
        assert np.mean(pred == answers) >= 0.95


class TestRetrieval:
    def test_score_range_and_repeatability(self):
        cfg = config()
        rng = np.random.default_rng(2)
        params = init_params(cfg, rng)
        init_retrieval_head(params, cfg, rng)
        batch = seqs(rng, 4, cfg)
        s = retrieval_score(params, batch, VOCAB, cfg)
        assert ((s > 0) & (s < 1)).all()
        np.testing.assert_array_equal(s, retrieval_score(params, batch, VOCAB, cfg))

    def test_pair_sampler(self):
        pairs = sample_retrieval_pairs(6, np.random.default_rng(0))
        matched = [p for p in pairs if p[2]]
        unmatched = [p for p in pairs if not p[2]]
        assert len(matched) == len(unmatched) == 6
        assert all(s == i for s, i, _ in matched) and all(s != i for s, i, _ in unmatched)

    def test_overfit_five_by_five(self):
        # matching needs one layer to mix text with regions and another to read it out
        cfg = config(layers=2)
        rng = np.random.default_rng(3)
        params = init_params(cfg, rng)
        init_retrieval_head(params, cfg, rng)
        sentences = [[5 + i, 6 + i, 10 + i % 3] for i in range(5)]  # pairwise distinct
        images = [rng.standard_normal((2, cfg.region_dim)) for _ in range(5)]
        grid = [InputSequence(sentences[i], [], images[j]) for i in range(5) for j in range(5)]
        labels = np.eye(5).reshape(25, 1)
        fit(params, lambda: bce_with_logits(retrieval_logits(params, grid, VOCAB, cfg), labels), 200)
        scores = retrieval_score(params, grid, VOCAB, cfg).reshape(5, 5)
        for i in range(5):
            assert scores[i, i] > np.delete(scores[i], i).max()
            assert scores[i, i] > np.delete(scores[:, i], i).max()


class TestRecall:
    def test_identity(self):
        assert recall_at_k(np.eye(6), range(6), 1) == 1.0

    def test_reversed_diagonal_full_k(self):
        s = np.fliplr(np.eye(5))
        assert recall_at_k(s, range(5), 5) == 1.0
        assert recall_at_k(s, range(5), 1) == pytest.approx(1 / 5)

    def test_ties_broken_by_index(self):
        s = np.zeros((2, 3))
        assert recall_at_k(s, [0, 2], 1) == 0.5
        assert recall_at_k(s, [0, 2], 2) == 0.5

    def test_random_against_sort(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            s = np.round(rng.random((10, 10)), 1)  # coarse values force ties
            gt = rng.permutation(10)
            for k in (1, 5, 10):
                hits = 0
                for q in range(10):
                    order = sorted(range(10), key=lambda j: (-s[q, j], j))
                    hits += order.index(gt[q]) < k
                assert recall_at_k(s, gt, k) == hits / 10

    @given(st.integers(0, 10**6))
    def test_monotone_in_k(self, seed):
        rng = np.random.default_rng(seed)
        s, gt = rng.random((6, 8)), rng.integers(0, 8, 6)
        r = [recall_at_k(s, gt, k) for k in range(1, 9)]
        assert r == sorted(r) and r[-1] == 1.0


class TestNlvr2:
    def setup_method(self):
        self.cfg = config()
        rng = np.random.default_rng(4)
        self.params = init_params(self.cfg, rng)
        init_nlvr2_head(self.params, self.cfg, rng)
        self.rng = rng

    def test_shape_and_order_sensitivity(self):
        a, b = seqs(self.rng, 2, self.cfg)
        ab = nlvr2_forward(self.params, [a], [b], VOCAB, self.cfg).data
        ba = nlvr2_forward(self.params, [b], [a], VOCAB, self.cfg).data
        assert ab.shape == (1, 2)
        assert not np.allclose(ab, ba)

    def test_overfit(self):
        left, right = seqs(self.rng, 12, self.cfg), seqs(self.rng, 12, self.cfg)
        labels = self.rng.integers(0, 2, 12)
        fit(self.params, lambda: cross_entropy_from_logits(
            nlvr2_forward(self.params, left, right, VOCAB, self.cfg), labels), 150)
        pred = nlvr2_forward(self.params, left, right, VOCAB, self.cfg).data.argmax(axis=1)
        assert np.mean(pred == labels) >= 0.95


class TestDecoding:
    def test_default_beam(self):
        assert DEFAULT_BEAM_SIZE == 5

    @given(st.integers(0, 10**6), st.integers(1, 5))
    @settings(max_examples=40)
    def test_beam_one_is_greedy(self, seed, max_len):
        step = markov_step_fn(np.random.default_rng(seed).normal(0, 2, (5, 4)))
        assert beam_search(step, 3, max_len, 1) == greedy_decode(step, 3, max_len)

    def test_hand_built_three_token_model(self):
        # tokens: 0, 1, and 2 = terminator.  Greedy takes 0 first but the best
        # complete sequence starts with 1.
        table = np.log(np.array([
            [0.55, 0.45, 1e-9],   # start
            [0.34, 0.33, 0.33],   # after 0
            [0.01, 0.01, 0.98],   # after 1
            [1 / 3, 1 / 3, 1 / 3],
        ]))
        step = markov_step_fn(table)
        best = exhaustive_decode(step, 2, 3, 3)
        assert best.tokens == (1,)
        assert greedy_decode(step, 2, 3).tokens != best.tokens
        assert beam_search(step, 2, 3, 2).tokens == best.tokens
        assert beam_search(step, 2, 3, 5) == best

    def test_exhaustive_by_enumeration(self):
        table = np.random.default_rng(7).normal(0, 1.5, (4, 3))
        step = markov_step_fn(table)
        cands = []
        for n in range(4):
            for toks in itertools.product([0, 1], repeat=n):
                lp = sequence_log_prob(step, toks, 2) if n < 3 else \
                    sequence_log_prob(step, toks, 2) - float(step([toks])[0, 2])
                cands.append((lp, toks))
        lp, toks = max(cands, key=lambda c: (c[0], [-t for t in c[1]]))
        best = exhaustive_decode(step, 2, 3, 3)
        assert best.tokens == toks and best.log_prob == pytest.approx(lp, abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_wide_beam_matches_exhaustive(self, seed):
        step = markov_step_fn(np.random.default_rng(seed).normal(0, 1.5, (4, 3)))
        want = exhaustive_decode(step, 2, 3, 3)
        got = beam_search(step, 2, 3, 9)
        assert got.tokens == want.tokens and got.log_prob == pytest.approx(want.log_prob, abs=1e-12)

    @given(st.integers(0, 10**6), st.integers(1, 4))
    @settings(max_examples=40)
    def test_step_scores_sorted_and_terminator_absent(self, seed, beam):
        step = markov_step_fn(np.random.default_rng(seed).normal(0, 2, (6, 5)))
        best, done, history = beam_search(step, 4, 6, beam, return_all=True)
        for scores in history:
            assert scores == sorted(scores, reverse=True)
        assert 4 not in best.tokens and len(best.tokens) <= 6
        for d in done:
            assert d.log_prob <= 0.0

    def test_invalid_sizes(self):
        step = markov_step_fn(np.zeros((3, 2)))
        with pytest.raises(ValueError):
            beam_search(step, 1, 3, 0)
        with pytest.raises(ValueError):
            greedy_decode(step, 1, 0)


class TestCaption:
    def setup_method(self):
        self.cfg = config()
        self.rng = np.random.default_rng(5)
        self.params = init_params(self.cfg, self.rng)

    def test_default_mask_probability(self):
        assert CAPTION_MASK_PROB == 0.15

    def test_masking_only_touches_caption(self):
        seq = InputSequence([5, 6, 7], [8, 9], np.zeros((1, self.cfg.region_dim)))
        m = caption_masking(seq, VOCAB, 0, 1.0)
        # [CLS] 5 6 7 [SEP] 8 9 [SEP]: caption words and their [SEP] only
        assert m.positions == [1, 2, 3, 4]

    def test_nothing_masked_is_zero(self):
        seq = InputSequence([5, 6], [7], np.zeros((1, self.cfg.region_dim)))
        assert caption_train_step(self.params, seq, VOCAB, self.cfg, 0, 0.0).item() == 0.0

    def test_loss_decreases(self):
        data = seqs(self.rng, 10, self.cfg)
        seeds = [(0, i) for i in range(10)]
        before, _ = caption_loss(self.params, data, VOCAB, self.cfg, seeds, 0.5)
        fit(self.params, lambda: caption_loss(self.params, data, VOCAB, self.cfg, seeds, 0.5)[0], 200)
        after, _ = caption_loss(self.params, data, VOCAB, self.cfg, seeds, 0.5)
        assert after.item() < 0.5 * before.item()

    def test_generation_respects_limits(self):
        tags = [7, 8]
        regions = self.rng.standard_normal((2, self.cfg.region_dim))
        for beam in (1, 3):
            out = generate_caption(self.params, tags, regions, VOCAB, self.cfg, beam, max_len=4)
            assert len(out) <= 4
            assert not set(out) & VOCAB.special_ids()

    def test_greedy_generation_equals_beam_one(self):
        tags, regions = [7], self.rng.standard_normal((1, self.cfg.region_dim))
        step = caption_step_fn(self.params, tags, regions, VOCAB, self.cfg)
        assert generate_caption(self.params, tags, regions, VOCAB, self.cfg, 1, 5) == \
            list(beam_search(step, VOCAB.sep_id, 5, 1).tokens)

    def test_step_probabilities_normalised(self):
        step = caption_step_fn(self.params, [7], np.zeros((1, self.cfg.region_dim)), VOCAB, self.cfg)
        lp = step([(), (5,), (5, 6)])
        np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0, rtol=1e-12)
        assert np.isneginf(lp[:, [VOCAB.pad_id, VOCAB.cls_id, VOCAB.mask_id, VOCAB.unk_id]]).all()
