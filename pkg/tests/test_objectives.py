import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from vinvl.model import ModelConfig, TokenVocab, init_params
from vinvl.objectives import (DEFAULT_MASK_PROB, MATCHED, POLLUTION_SPLIT, Q_POLLUTED, W_POLLUTED, PollutionError,
                              PollutionPool, PretrainExample, Triple, cl3_loss, init_pretrain_heads, mask_tokens,
                              mtl_loss, pollute, prepare_example, pretraining_loss)
from vinvl.tensor import Adam, Tensor

SPECIAL = {0, 1, 2, 3, 4}
VOCAB = TokenVocab(f"t{i}" for i in range(15))
CONFIG = ModelConfig(layers=1, hidden=16, heads=2, ff_dim=32, vocab_size=len(VOCAB), appearance_dim=4,
                     max_text_len=10, max_region_len=3)


def triple(rng, label=MATCHED):
    return Triple(rng.integers(5, len(VOCAB), int(rng.integers(1, 5))),
                  rng.integers(5, len(VOCAB), int(rng.integers(1, 4))),
                  rng.standard_normal((int(rng.integers(1, 4)), CONFIG.region_dim)), label)


def model(seed=0):
    rng = np.random.default_rng(seed)
    params = init_params(CONFIG, rng)
    init_pretrain_heads(params, CONFIG, rng)
    return params


class TestMaskTokens:
    H = [1, 7, 8, 9, 2, 10, 11, 2]

    def test_prob_zero(self):
        m = mask_tokens(self.H, 0.0, 0, SPECIAL)
        assert m.ids == self.H and m.positions == []

    def test_prob_one_masks_every_eligible(self):
        m = mask_tokens(self.H, 1.0, 0, SPECIAL, mask_id=3)
        assert m.ids == [1, 3, 3, 3, 2, 3, 3, 2]
        assert m.positions == [1, 2, 3, 5, 6]

    def test_default_probability(self):
        assert DEFAULT_MASK_PROB == 0.15

    @given(st.lists(st.integers(0, 30), max_size=40), st.floats(0, 1), st.integers(0, 2**32))
    def test_specials_untouched_and_restorable(self, h, p, seed):
        m = mask_tokens(h, p, seed, SPECIAL)
        assert m.restore() == h
        for i, tok in enumerate(h):
            if tok in SPECIAL:
                assert m.ids[i] == tok and i not in m.positions
        assert all(m.ids[i] == 3 for i in m.positions)

    def test_deterministic(self):
        h = list(range(5, 60))
        assert mask_tokens(h, 0.3, (4, 2), SPECIAL) == mask_tokens(h, 0.3, (4, 2), SPECIAL)

    def test_rate(self):
        m = mask_tokens([7] * 100_000, 0.15, 1, SPECIAL)
        assert len(m.positions) / 100_000 == pytest.approx(0.15, abs=0.005)

    @pytest.mark.parametrize("p", [-0.1, 1.5])
    def test_probability_range(self, p):
        with pytest.raises(ValueError):
            mask_tokens([5], p)


class TestMtlLoss:
    def test_empty_is_zero(self):
        assert mtl_loss(None, []).item() == 0.0

    def test_uniform_logits(self):
        assert mtl_loss(Tensor(np.zeros((1, 17))), [4]).item() == pytest.approx(math.log(17), rel=1e-14)

    def test_two_positions_against_decimal(self):
        getcontext().prec = 50
        logits = np.array([[1.25, -0.5, 3.0, 0.125], [-2.0, 0.75, 0.0, 4.5]])
        targets = [2, 1]
        ref = Decimal(0)
        for row, t in zip(logits, targets):
            z = sum(Decimal(float(x)).exp() for x in row)
            ref += z.ln() - Decimal(float(row[t]))
        ref /= 2
        assert abs(mtl_loss(Tensor(logits), targets).item() - float(ref)) < 1e-12


class TestPollute:
    def pool(self):
        return PollutionPool([(5,), (6,), (7, 8)], [(9,), (10, 11), (12,)])

    def test_distribution_chi_square(self):
        t = Triple((5,), (9,), np.zeros((1, 2)))
        pool = self.pool()
        rng = np.random.default_rng(0)
        counts = np.bincount([pollute(t, pool, rng).label for _ in range(100_000)], minlength=3)
        freq = counts / counts.sum()
        np.testing.assert_allclose(freq, POLLUTION_SPLIT, atol=0.01)
        assert chisquare(counts, np.array(POLLUTION_SPLIT) * counts.sum()).pvalue > 0.01

    def test_single_alternative_always_chosen(self):
        t = Triple((5,), (9,), np.zeros((1, 2)))
        pool = PollutionPool([(5,), (6,)], [(9,), (10,)])
        for seed in range(200):
            out = pollute(t, pool, seed)
            if out.label == W_POLLUTED:
                assert out.w == (6,) and out.q == t.q
            elif out.label == Q_POLLUTED:
                assert out.q == (10,) and out.w == t.w

    def test_matched_is_identical(self):
        t = Triple((5,), (9,), np.arange(4.0).reshape(2, 2))
        seen = 0
        for seed in range(50):
            out = pollute(t, self.pool(), seed)
            if out.label == MATCHED:
                seen += 1
                assert out is t
        assert seen > 0

    @given(st.integers(0, 2**32))
    def test_polluted_changes_exactly_one_field(self, seed):
        t = Triple((5,), (9,), np.zeros((1, 2)))
        out = pollute(t, self.pool(), seed)
        changed = (out.w != t.w, out.q != t.q)
        assert changed == {MATCHED: (False, False), W_POLLUTED: (True, False), Q_POLLUTED: (False, True)}[out.label]
        assert out.regions is t.regions

    def test_pool_of_only_original(self):
        t = Triple((5,), (9,), np.zeros((1, 2)))
        pool = PollutionPool([(5,), (5,)], [(9,)])
        with pytest.raises(PollutionError):
            for seed in range(20):
                pollute(t, pool, seed)

    def test_empty_pool(self):
        t = Triple((5,), (9,), np.zeros((1, 2)))
        with pytest.raises(PollutionError):
            for seed in range(20):
                pollute(t, PollutionPool(), seed)

    def test_bad_label(self):
        with pytest.raises(ValueError):
            Triple((5,), (9,), np.zeros((1, 2)), label=3)


class TestContrastive:
    def test_uniform_logits_give_log3(self):
        params = {"cl3.W": Tensor(np.zeros((4, 3))), "cl3.b": Tensor(np.zeros(3))}
        cls = Tensor(np.random.default_rng(0).standard_normal((5, 4)))
        assert cl3_loss(cls, [0, 1, 2, 0, 1], params).item() == pytest.approx(math.log(3), rel=1e-14)

    def test_separable_batch_overfits(self):
        rng = np.random.default_rng(1)
        cls = Tensor(rng.standard_normal((6, 8)))
        labels = [0, 1, 2, 0, 1, 2]
        params = {"cl3.W": Tensor(rng.normal(0, 0.1, (8, 3)), requires_grad=True),
                  "cl3.b": Tensor(np.zeros(3), requires_grad=True)}
        opt = Adam(list(params.values()), lr=0.05)
        for _ in range(300):
            opt.zero_grad()
            loss = cl3_loss(cls, labels, params)
            loss.backward()
            opt.step()
        assert cl3_loss(cls, labels, params).item() < 0.05


class TestPretrainingLoss:
    def examples(self, labels, seed=0, mask_prob=0.5):
        rng = np.random.default_rng(seed)
        out = []
        for i, label in enumerate(labels):
            t = triple(rng, label)
            ids = t.sequence().text_ids(VOCAB)
            out.append(PretrainExample(t, mask_tokens(ids, mask_prob, (seed, i), VOCAB.special_ids(),
                                                      VOCAB.mask_id)))
        return out

    def test_all_polluted_is_contrastive_only(self):
        params = model()
        ex = self.examples([W_POLLUTED, Q_POLLUTED, W_POLLUTED], mask_prob=1.0)
        out = pretraining_loss(params, ex, VOCAB, CONFIG)
        assert out.n_masked == 0 and out.mtl.item() == 0.0
        assert out.total.item() == out.cl3.item()

    def test_flag_scores_polluted_tokens(self):
        params = model()
        ex = self.examples([W_POLLUTED, Q_POLLUTED], mask_prob=1.0)
        out = pretraining_loss(params, ex, VOCAB, CONFIG, mtl_on_polluted=True)
        assert out.n_masked == sum(len(e.masked.positions) for e in ex) > 0

    def test_sum_of_terms(self):
        params = model()
        out = pretraining_loss(params, self.examples([MATCHED, MATCHED, Q_POLLUTED, W_POLLUTED]), VOCAB, CONFIG)
        assert out.n_masked > 0
        assert out.total.item() == pytest.approx(out.mtl.item() + out.cl3.item(), rel=1e-15)

    def test_nothing_masked_total_is_cl3(self):
        params = model()
        out = pretraining_loss(params, self.examples([MATCHED, MATCHED], mask_prob=0.0), VOCAB, CONFIG)
        assert out.total.item() == out.cl3.item()

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10**6))
    def test_non_negative(self, seed):
        labels = np.random.default_rng(seed).integers(0, 3, 4)
        out = pretraining_loss(model(seed % 3), self.examples(labels, seed), VOCAB, CONFIG)
        assert out.total.item() >= 0.0

    def test_deterministic(self):
        a = pretraining_loss(model(), self.examples([0, 1, 2, 0]), VOCAB, CONFIG).total.item()
        b = pretraining_loss(model(), self.examples([0, 1, 2, 0]), VOCAB, CONFIG).total.item()
        assert a == b


class TestPrepareExample:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.triples = [triple(rng) for _ in range(10)]
        self.pool = PollutionPool.from_triples(self.triples)

    def test_seeded_by_global_seed_and_index(self):
        a = prepare_example(self.triples[0], self.pool, VOCAB, CONFIG, 3, 17)
        b = prepare_example(self.triples[0], self.pool, VOCAB, CONFIG, 3, 17)
        assert a.masked == b.masked and a.triple.label == b.triple.label and a.triple.w == b.triple.w

    def test_independent_of_preparation_order(self):
        forward = [prepare_example(t, self.pool, VOCAB, CONFIG, 1, i) for i, t in enumerate(self.triples)]
        backward = [prepare_example(self.triples[i], self.pool, VOCAB, CONFIG, 1, i) for i in reversed(range(10))]
        assert [e.masked for e in forward] == [e.masked for e in reversed(backward)]

    def test_masked_ids_match_polluted_sequence(self):
        for i, t in enumerate(self.triples):
            e = prepare_example(t, self.pool, VOCAB, CONFIG, 0, i)
            assert e.masked.restore() == e.triple.sequence().truncated(CONFIG).text_ids(VOCAB)
