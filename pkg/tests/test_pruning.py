import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra import numpy as hnp

from leopfl.nn import LayerShape, MomentumState, ParamVector
from leopfl.pruning import (
    LayerQuota,
    Mask,
    PruneHyperparams,
    apply_mask,
    decay_prune_rate,
    erk_layer_counts,
    init_mask_sfn,
    initial_prune_time,
    layer_quotas,
    momentum_shares,
    pq_index,
    prune_and_regrow,
    prune_frequency,
    prune_schedule,
    target_active_count,
    vote,
)

SEGS = (LayerShape(0, "conv", 3, 8, 3), LayerShape(1, "conv", 8, 16, 3), LayerShape(2, "dense", 16, 10))


def pq_oracle(w, s, j):
    mpmath.mp.dps = 50
    a = [abs(mpmath.mpf(float(x))) for x in w]
    d = len(a)
    ns = mpmath.fsum(x ** mpmath.mpf(s) for x in a) ** (1 / mpmath.mpf(s))
    nj = mpmath.fsum(x ** mpmath.mpf(j) for x in a) ** (1 / mpmath.mpf(j))
    return float(1 - mpmath.mpf(d) ** (1 / mpmath.mpf(j) - 1 / mpmath.mpf(s)) * ns / nj)


class TestHyper:
    def test_defaults(self):
        h = PruneHyperparams()
        assert (h.s, h.j, h.compression, h.scaling, h.vote_ratio, h.target_sparsity) == (0.5, 1.0, 1.0, 0.9, 0.5, 0.6)

    @pytest.mark.parametrize("kw", [dict(s=0.0), dict(s=1.2, j=2.0), dict(s=1.0, j=1.0), dict(scaling=0.0),
                                    dict(threshold=1.5), dict(target_sparsity=1.0), dict(sched_gamma=1.0),
                                    dict(vote_comparison="sideways")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            PruneHyperparams(**kw)


class TestMasks:
    def test_dense_mask(self):
        m = init_mask_sfn(SEGS, 0.0, seed=0)
        assert m.nnz == m.bits.size and m.sparsity == 0.0

    @pytest.mark.parametrize("mu", [0.3, 0.6, 0.9])
    def test_global_density(self, mu):
        m = init_mask_sfn(SEGS, mu, seed=1)
        want = math.ceil((1 - mu) * m.total_weights)
        assert abs(m.active_weights - want) <= 1

    def test_biases_never_masked(self):
        m = init_mask_sfn(SEGS, 0.8, seed=2)
        p = ParamVector.zeros(SEGS)
        assert m.bits[~p.weight_positions()].all()

    def test_identical_layers_equal_density(self):
        segs = (LayerShape(0, "conv", 4, 4, 3), LayerShape(1, "conv", 4, 4, 3))
        counts = erk_layer_counts(segs, 0.7)
        assert abs(counts[0] - counts[1]) <= 1

    def test_wider_layers_sparser(self):
        counts = erk_layer_counts(SEGS, 0.9)
        dens = [c / s.weight_count for c, s in zip(counts, SEGS)]
        assert dens[1] < dens[0]

    def test_floor_of_one(self, caplog):
        segs = (LayerShape(0, "dense", 1, 1), LayerShape(1, "dense", 100, 100))
        # ERK wants the 1x1 layer tiny at extreme sparsity, but never empty
        counts = erk_layer_counts(segs, 0.9999)
        assert min(counts) >= 1

    def test_seeded(self):
        assert np.array_equal(init_mask_sfn(SEGS, 0.6, 5).bits, init_mask_sfn(SEGS, 0.6, 5).bits)

    def test_apply_mask(self):
        rng = np.random.default_rng(0)
        p = ParamVector(SEGS, rng.normal(size=sum(s.param_count for s in SEGS)))
        assert np.array_equal(apply_mask(p, Mask.ones(SEGS)).values, p.values)
        zero = Mask(SEGS, np.zeros(len(p)))
        assert not apply_mask(p, zero).values.any()
        m = init_mask_sfn(SEGS, 0.5, 0)
        once = apply_mask(p, m)
        assert np.array_equal(apply_mask(once, m).values, once.values)

    def test_apply_mask_layout(self):
        with pytest.raises(ValueError):
            apply_mask(ParamVector.zeros(SEGS), Mask(SEGS[:1], np.ones(SEGS[0].param_count)))

    def test_sparsity_definition(self):
        m = init_mask_sfn(SEGS, 0.6, 3)
        assert m.sparsity == pytest.approx(1 - m.active_weights / m.total_weights)
        assert m.per_layer_counts == [int(m.layer_bits(l).sum()) for l in range(3)]


class TestPqIndex:
    def test_uniform_zero(self):
        assert pq_index(np.ones(4)) == pytest.approx(0.0, abs=1e-12)

    def test_one_sparse(self):
        assert pq_index(np.array([1.0, 0, 0, 0])) == pytest.approx(0.75, abs=1e-12)

    def test_random_64_oracle(self):
        w = np.random.default_rng(64).normal(size=64)
        assert pq_index(w) == pytest.approx(pq_oracle(w, 0.5, 1.0), rel=1e-9)
        assert pq_index(w, 0.5, 2.0) == pytest.approx(pq_oracle(w, 0.5, 2.0), rel=1e-9)

    def test_all_zero_defined(self):
        assert pq_index(np.zeros(4)) == pytest.approx(0.75)

    def test_as_printed_flag(self):
        # literal exponent: uniform vectors come out negative
        assert pq_index(np.ones(4), as_printed=True) == pytest.approx(1 - 4.0 * 4.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            pq_index(np.zeros(0))

    @given(hnp.arrays(np.float64, st.integers(1, 40), elements=st.floats(-100, 100)))
    def test_bounds(self, w):
        assume(np.abs(w).max() > 1e-6)
        d = w.size
        i = pq_index(w)
        assert -1e-9 <= i <= 1 - d ** (1 - 2) + 1e-9

    @given(hnp.arrays(np.float64, st.integers(1, 40), elements=st.floats(-100, 100)),
           st.floats(1e-3, 1e3), st.booleans())
    def test_scale_invariant(self, w, c, neg):
        assume(np.abs(w).max() > 1e-6)
        c = -c if neg else c
        assert abs(pq_index(c * w) - pq_index(w)) < 1e-12

    @given(st.integers(1, 50), st.floats(1e-3, 10))
    def test_uniform_magnitude(self, d, v):
        signs = np.where(np.arange(d) % 2, -1.0, 1.0)
        assert abs(pq_index(signs * v)) < 1e-9


class TestPruneQuota:
    def test_worked_example(self):
        from leopfl.pruning import prune_quota

        r, c = prune_quota(4, 0.0, 1.0, 0.9, 0.3, 0.5, 1.0)
        assert r == pytest.approx(1.0, rel=1e-12)
        assert c == 1

    def test_compressible_limit(self):
        from leopfl.pruning import prune_quota

        r, c = prune_quota(1000, 1 - 1e-12, 1.0, 0.9, 0.3)
        assert r < 1e-9
        assert c == math.floor(1000 * min(0.9, 0.3))

    def test_rejects(self):
        from leopfl.pruning import prune_quota

        with pytest.raises(ValueError):
            prune_quota(0, 0.1, 1, 0.9, 0.3)
        with pytest.raises(ValueError):
            prune_quota(4, 1.0, 1, 0.9, 0.3)

    @given(st.integers(1, 5000), st.floats(0, 0.999), st.floats(0, 3), st.floats(0.01, 1), st.floats(0, 1))
    def test_ranges(self, d, pq, eta, delta, zeta):
        from leopfl.pruning import prune_quota

        r, c = prune_quota(d, pq, eta, delta, zeta)
        assert 0 <= r <= d
        assert 0 <= c <= zeta * d + 1e-6


class TestVote:
    def test_static(self):
        w0, w1 = np.zeros(3), np.ones(3)
        w = np.array([0.5, 0.2, 0.1])
        assert vote(w, w, w1, w0, 0.02) == 1

    def test_worked_example(self):
        w0 = np.zeros(1)
        assert vote(np.array([math.sqrt(10)]), np.array([3.0]), np.array([1.0]), w0, 0.02) == 0

    def test_stationary_first_step(self):
        w = np.ones(3)
        assert vote(w + 1, w, w, w, 0.02) == 1


class TestTiming:
    def test_never_triggers(self):
        assert initial_prune_time([[1, 1, 1]] * 7, 0.5, rounds=7) == 7

    def test_trace(self):
        assert initial_prune_time([[1, 1, 1, 1], [1, 1, 0, 0], [0, 0, 0, 1]], 0.5) == 3

    def test_eps_one(self):
        assert initial_prune_time([[1, 0, 1], [1, 1, 1]], 1.0) == 1

    def test_above_comparison(self):
        assert initial_prune_time([[0, 0], [1, 0], [1, 1]], 0.5, comparison="above") == 2

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            initial_prune_time([[1]], 0.0)


class TestSchedule:
    def test_worked_trace(self):
        sched = prune_schedule(10, 1.0, 2.0, 2.0, 100)
        assert sched.frequencies[:5] == (12, 6, 3, 2, 1)
        assert sched.times == (12, 18, 21, 23, 24)

    def test_large_gamma_single_event(self):
        sched = prune_schedule(10, 1.0, 2.0, 1e9, 100)
        assert sched.times == (12,)

    def test_empty_window(self):
        assert prune_schedule(99, 1.0, 2.0, 2.0, 100).times == ()

    @given(st.integers(1, 60), st.floats(0.5, 2.0), st.floats(0, 10), st.floats(1.05, 5), st.integers(2, 200))
    def test_monotone(self, t_hat, alpha, beta, gamma, rounds):
        assume(t_hat < rounds)
        sched = prune_schedule(t_hat, alpha, beta, gamma, rounds)
        assert all(a < b for a, b in zip(sched.times, sched.times[1:]))
        assert all(t_hat < t < rounds for t in sched.times)
        pf = [prune_frequency(t_hat, r, alpha, beta, gamma) for r in range(1, 30)]
        assert all(a >= b for a, b in zip(pf, pf[1:]))


def regrow_oracle(values, bits, mom, segs, counts):
    """Sort-based reference: python loops over explicit sorted lists."""
    values = values.copy()
    bits = bits.copy()
    spans, off = [], 0
    for s in segs:
        spans.append((off, off + s.weight_count))
        off += s.param_count
    mass = [sum(abs(mom[i]) * bits[i] for i in range(a, b)) for a, b in spans]
    total = sum(sum(abs(mom[i]) for i in range(a, b)) for a, b in spans)
    shares = [m / total if total else 0.0 for m in mass]
    pruned = 0
    for (a, b), c in zip(spans, counts):
        active = sorted((abs(values[i]), i) for i in range(a, b) if bits[i])
        c = min(c, max(len(active) - 1, 0))
        for _, i in active[:c]:
            bits[i] = 0
            values[i] = 0.0
        pruned += c
    for (a, b), share in zip(spans, shares):
        k = math.floor(share * pruned)
        cand = sorted((-abs(mom[i]), i) for i in range(a, b) if not bits[i])
        for _, i in cand[:k]:
            bits[i] = 1
            values[i] = 0.0
    return values * bits, bits


def quotas_for(mask, counts):
    return [LayerQuota(l, mask.per_layer_counts[l], 0.0, 0.0, c) for l, c in enumerate(counts)]


class TestPruneRegrow:
    def setup_method(self):
        self.segs = (LayerShape(0, "dense", 6, 5), LayerShape(1, "dense", 5, 4))
        n = sum(s.param_count for s in self.segs)
        self.rng = np.random.default_rng(11)
        self.mask = init_mask_sfn(self.segs, 0.5, seed=3)
        self.params = apply_mask(ParamVector(self.segs, self.rng.normal(size=n)), self.mask)
        self.mom = MomentumState(self.rng.normal(size=n), 0.9)

    def test_sort_oracle(self):
        counts = [4, 2]
        p, m, ev = prune_and_regrow(self.params, self.mask, self.mom, quotas_for(self.mask, counts))
        ref_v, ref_b = regrow_oracle(self.params.values, self.mask.bits, self.mom.values, self.segs, counts)
        assert np.array_equal(m.bits, ref_b)
        assert np.array_equal(p.values, ref_v)

    def test_zero_momentum_no_regrowth(self):
        zero = MomentumState(np.zeros_like(self.mom.values))
        before = self.mask.active_weights
        _, m, ev = prune_and_regrow(self.params, self.mask, zero, quotas_for(self.mask, [3, 2]))
        assert sum(ev.regrown) == 0
        assert m.active_weights == before - 5

    def test_single_layer_momentum(self):
        mom = self.mom.values.copy()
        a, b = self.params.span(1)
        mom[a:b] = 0.0
        _, _, ev = prune_and_regrow(self.params, self.mask, MomentumState(mom), quotas_for(self.mask, [3, 2]))
        assert ev.regrown[1] == 0
        assert momentum_shares(mom, self.mask)[1] == 0.0

    def test_model_masked_after(self):
        p, m, _ = prune_and_regrow(self.params, self.mask, self.mom, quotas_for(self.mask, [4, 4]))
        assert not p.values[m.bits == 0].any()

    def test_clamped_at_one(self):
        p, m, ev = prune_and_regrow(self.params, self.mask, MomentumState(np.zeros_like(self.mom.values)),
                                    quotas_for(self.mask, [1000, 1000]))
        assert min(m.per_layer_counts) == 1
        assert ev.quotas[0].count == self.mask.per_layer_counts[0] - 1

    def test_top_up(self):
        target = self.mask.active_weights
        _, m, ev = prune_and_regrow(self.params, self.mask, self.mom, quotas_for(self.mask, [5, 3]),
                                    min_active=target)
        assert m.active_weights == target
        assert ev.topped_up == target - (self.mask.active_weights - 8 + sum(ev.regrown))

    @given(st.integers(0, 10_000), st.integers(0, 10), st.integers(0, 8), st.floats(0.1, 0.9))
    def test_conservation(self, seed, c0, c1, mu):
        rng = np.random.default_rng(seed)
        n = sum(s.param_count for s in self.segs)
        mask = init_mask_sfn(self.segs, mu, seed)
        params = apply_mask(ParamVector(self.segs, rng.normal(size=n)), mask)
        mom = MomentumState(rng.normal(size=n) * rng.integers(0, 2, size=n))
        p, m, ev = prune_and_regrow(params, mask, mom, quotas_for(mask, [c0, c1]))
        assert m.active_weights == mask.active_weights - ev.pruned + sum(ev.regrown)
        assert min(m.per_layer_counts) >= 1
        assert not p.values[m.bits == 0].any()
        assert m.bits[~params.weight_positions()].all()

    def test_layer_quotas_use_rule(self):
        hyper = PruneHyperparams()
        qs = layer_quotas(self.params, self.mask, hyper)
        from leopfl.pruning import prune_quota

        for q in qs:
            a, b = self.params.weight_span(q.layer)
            w = self.params.values[a:b][self.mask.bits[a:b] == 1]
            assert q.pq == pytest.approx(pq_index(w))
            assert q.count == min(prune_quota(q.active, q.pq, 1.0, 0.9, 0.3)[1], q.active - 1)

    def test_decay(self):
        assert decay_prune_rate(0.01) == 0.005

    def test_target_active_count(self):
        assert target_active_count(1000, 0.6) == 400
        assert target_active_count(999, 0.6) == 400
