"""Masks and the dynamic pruning policy.

Sparsity is always counted over weight coordinates; biases are never masked
and their mask bits stay 1.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import LayerShape, MomentumState, ParamVector

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PruneHyperparams:
    s: float = 0.5
    j: float = 1.0
    compression: float = 1.0
    scaling: float = 0.9
    threshold: float = 0.3
    prune_rate: float = 0.01
    target_sparsity: float = 0.6
    vote_threshold: float = 0.02
    vote_ratio: float = 0.5
    sched_alpha: float = 1.0
    sched_beta: float = 2.0
    sched_gamma: float = 2.0
    vote_comparison: str = "below"
    pq_exponent_as_printed: bool = False

    def __post_init__(self):
        # the default pair is (0.5, 1), so j = 1 is admitted as long as s < j
        if not (0 < self.s <= 1 <= self.j and self.s < self.j):
            raise ValueError("norm exponents must satisfy 0 < s <= 1 <= j with s < j")
        if not 0 < self.scaling <= 1:
            raise ValueError("scaling factor must lie in (0, 1]")
        if not 0 <= self.threshold <= 1:
            raise ValueError("prune threshold must lie in [0, 1]")
        if not 0 <= self.target_sparsity < 1:
            raise ValueError("target sparsity must lie in [0, 1)")
        if self.sched_gamma <= 1:
            raise ValueError("schedule gamma must exceed 1")
        if self.vote_comparison not in ("below", "above"):
            raise ValueError("vote_comparison must be 'below' or 'above'")


@dataclass
class Mask:
    segments: tuple[LayerShape, ...]
    bits: np.ndarray

    def __post_init__(self):
        self.segments = tuple(self.segments)
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        self._layout = ParamVector(self.segments, np.zeros(self.bits.size, dtype=np.uint8))

    @classmethod
    def ones(cls, segments) -> "Mask":
        return cls(segments, np.ones(sum(s.param_count for s in segments), dtype=np.uint8))

    def weight_span(self, layer: int) -> tuple[int, int]:
        return self._layout.weight_span(layer)

    def layer_bits(self, layer: int) -> np.ndarray:
        a, b = self.weight_span(layer)
        return self.bits[a:b]

    @property
    def per_layer_counts(self) -> list[int]:
        return [int(self.layer_bits(l).sum()) for l in range(len(self.segments))]

    @property
    def active_weights(self) -> int:
        return sum(self.per_layer_counts)

    @property
    def total_weights(self) -> int:
        return sum(s.weight_count for s in self.segments)

    @property
    def density(self) -> float:
        return self.active_weights / self.total_weights

    @property
    def sparsity(self) -> float:
        return (self.total_weights - self.active_weights) / self.total_weights

    @property
    def nnz(self) -> int:
        return int(self.bits.sum())

    def copy(self) -> "Mask":
        return Mask(self.segments, self.bits.copy())


def target_active_count(total_weights: int, target_sparsity: float) -> int:
    return math.ceil((1.0 - target_sparsity) * total_weights - 1e-9)


def erk_layer_counts(segments: Sequence[LayerShape], target_sparsity: float) -> list[int]:
    """Per-layer active-weight counts with density proportional to
    ``(in + out + k^2) / (in * out * k^2)``; saturated layers become dense
    and the rest is re-spread. Totals are exact via largest remainder."""
    sizes = np.array([s.weight_count for s in segments], dtype=np.float64)
    raw = np.array(
        [(s.in_channels + s.out_channels + s.kernel**2) / s.weight_count for s in segments]
    )
    target = target_active_count(int(sizes.sum()), target_sparsity)
    dense = np.zeros(len(segments), dtype=bool)
    while True:
        free = ~dense
        budget = target - sizes[dense].sum()
        eps = budget / (raw[free] * sizes[free]).sum() if free.any() else 0.0
        over = free & (eps * raw > 1.0)
        if not over.any():
            break
        dense |= over
    want = np.where(dense, sizes, eps * raw * sizes)
    counts = np.floor(want).astype(int)
    short = target - counts.sum()
    if short > 0:
        remainder = want - counts
        remainder[counts >= sizes] = -1.0
        order = np.lexsort((np.arange(len(segments)), -remainder))
        for l in order[:short]:
            counts[l] += 1
    floored = counts < 1
    if floored.any():
        log.warning("sparsity %.3f leaves layers %s empty; keeping one weight each",
                    target_sparsity, np.flatnonzero(floored).tolist())
        counts[floored] = 1
    return counts.tolist()


def init_mask_sfn(segments: Sequence[LayerShape], target_sparsity: float, seed: int) -> Mask:
    if not 0 <= target_sparsity < 1:
        raise ValueError("target sparsity must lie in [0, 1)")
    mask = Mask.ones(segments)
    if target_sparsity == 0:
        return mask
    rng = np.random.default_rng(seed)
    for l, count in enumerate(erk_layer_counts(segments, target_sparsity)):
        a, b = mask.weight_span(l)
        layer = np.zeros(b - a, dtype=np.uint8)
        layer[rng.choice(b - a, size=count, replace=False)] = 1
        mask.bits[a:b] = layer
    return mask


def apply_mask(params: ParamVector, mask: Mask) -> ParamVector:
    if len(params) != mask.bits.size:
        raise ValueError("mask and parameter layouts differ")
    return params.like(params.values * mask.bits.astype(params.dtype))


# ------------------------------------------------------------ PQ-index rule


def _lp(x: np.ndarray, p: float) -> float:
    return float(np.sum(x**p) ** (1.0 / p))


def pq_index(weights: np.ndarray, s: float = 0.5, j: float = 1.0, as_printed: bool = False) -> float:
    """Norm-ratio compressibility of the active weights of one layer.

    Zero for uniform magnitudes, ``1 - d**(1/j - 1/s)`` for a 1-sparse vector.
    ``as_printed`` flips the sign of the dimension exponent.
    """
    w = np.abs(np.asarray(weights, dtype=np.float64).ravel())
    d = w.size
    if d < 1:
        raise ValueError("PQ index needs at least one active weight")
    expo = (1.0 / s - 1.0 / j) if as_printed else (1.0 / j - 1.0 / s)
    factor = float(d) ** expo
    top = w.max()
    if top == 0:
        return 1.0 - factor
    w = w / top
    return 1.0 - factor * _lp(w, s) / _lp(w, j)


def prune_quota(d: int, pq: float, compression: float, scaling: float, threshold: float,
                s: float = 0.5, j: float = 1.0) -> tuple[float, int]:
    """Lower bound ``r`` on retained weights and the prune count ``c``."""
    if d < 1:
        raise ValueError("layer must have an active weight")
    if pq >= 1:
        raise ValueError("PQ index must be below 1")
    expo = j / (j - s)
    r = d * (1.0 + compression) ** (-expo) * (1.0 - pq) ** expo
    frac = min(scaling * (1.0 - r / d), threshold)
    # guard against d*frac landing a hair under an exact integer
    c = int(math.floor(d * frac + 1e-9))
    return r, max(c, 0)


# ------------------------------------------------------------------- timing


def vote(w_t: np.ndarray, w_prev: np.ndarray, w_1: np.ndarray, w_0: np.ndarray, eps_c: float) -> int:
    """1 when the change in distance from the start is small relative to the first step."""
    w_0 = np.asarray(w_0, dtype=np.float64)
    base = float(np.sum((np.asarray(w_1, dtype=np.float64) - w_0) ** 2))
    if base == 0:
        return 1
    now = float(np.sum((np.asarray(w_t, dtype=np.float64) - w_0) ** 2))
    before = float(np.sum((np.asarray(w_prev, dtype=np.float64) - w_0) ** 2))
    return int(abs((now - before) / base) < eps_c)


def vote_crosses(mean_vote: float, eps_v: float, comparison: str = "below") -> bool:
    if comparison == "below":
        return mean_vote < eps_v
    if comparison == "above":
        return mean_vote >= eps_v
    raise ValueError(f"unknown comparison {comparison!r}")


def initial_prune_time(votes_per_round: Sequence[Sequence[int]], eps_v: float,
                       rounds: int | None = None, comparison: str = "below") -> int:
    """First (1-based) round whose mean vote crosses ``eps_v``; ``rounds`` if none."""
    if not 0 < eps_v <= 1:
        raise ValueError("vote ratio threshold must lie in (0, 1]")
    total = len(votes_per_round) if rounds is None else rounds
    for t, votes in enumerate(votes_per_round, start=1):
        if vote_crosses(float(np.mean(votes)), eps_v, comparison):
            return t
    return total


@dataclass(frozen=True)
class PruneSchedule:
    initial_time: int
    frequencies: tuple[int, ...]
    times: tuple[int, ...]

    def __contains__(self, r: int) -> bool:
        return r in self.times


def prune_frequency(t_hat: int, r: int, alpha: float, beta: float, gamma: float) -> int:
    return int(math.floor((t_hat + beta) ** alpha / gamma ** (r - 1) + 0.5))


def prune_schedule(t_hat: int, alpha: float, beta: float, gamma: float, rounds: int) -> PruneSchedule:
    freqs, times = [], []
    t = 0
    for r in range(1, rounds + 1):
        pf = prune_frequency(t_hat, r, alpha, beta, gamma)
        if pf <= 0:
            break
        freqs.append(pf)
        t += pf
        if t >= rounds:
            break
        if t > t_hat:
            times.append(t)
    return PruneSchedule(t_hat, tuple(freqs), tuple(times))


# -------------------------------------------------------------- prune/regrow


@dataclass(frozen=True)
class LayerQuota:
    layer: int
    active: int
    pq: float
    lower_bound: float
    count: int


@dataclass
class PruneEvent:
    quotas: list[LayerQuota]
    regrown: list[int]
    topped_up: int = 0
    active_before: int = 0
    active_after: int = 0

    @property
    def pruned(self) -> int:
        return sum(q.count for q in self.quotas)


def layer_quotas(params: ParamVector, mask: Mask, hyper: PruneHyperparams) -> list[LayerQuota]:
    out = []
    for l in range(len(params.segments)):
        a, b = params.weight_span(l)
        bits = mask.bits[a:b].astype(bool)
        d = int(bits.sum())
        w = params.values[a:b][bits]
        pq = pq_index(w, hyper.s, hyper.j, hyper.pq_exponent_as_printed)
        r, c = prune_quota(d, min(pq, 1.0 - 1e-12), hyper.compression, hyper.scaling,
                           hyper.threshold, hyper.s, hyper.j)
        out.append(LayerQuota(l, d, pq, r, min(c, d - 1)))
    return out


def momentum_shares(momentum: np.ndarray, mask: Mask) -> list[float]:
    """Each layer's active-momentum mass over total weight momentum mass."""
    spans = [mask.weight_span(l) for l in range(len(mask.segments))]
    total = sum(float(np.abs(momentum[a:b]).sum(dtype=np.float64)) for a, b in spans)
    if total == 0:
        return [0.0] * len(spans)
    return [
        float(np.abs(momentum[a:b] * mask.bits[a:b]).sum(dtype=np.float64)) / total
        for a, b in spans
    ]


def _top_inactive(mom_abs: np.ndarray, inactive: np.ndarray, k: int) -> np.ndarray:
    idx = np.flatnonzero(inactive)
    if k <= 0 or idx.size == 0:
        return idx[:0]
    order = np.lexsort((idx, -mom_abs[idx]))
    return idx[order[:k]]


def prune_and_regrow(params: ParamVector, mask: Mask, momentum: MomentumState,
                     quotas: Sequence[LayerQuota], min_active: int | None = None):
    """Magnitude prune followed by momentum-guided regrowth.

    Each layer drops its ``count`` smallest-magnitude active weights (ties to
    the lower index). The pruned total is shared out across layers by active
    momentum mass (floor per layer, capped by free slots) and regrown at the
    inactive positions with the largest momentum magnitude, starting at zero.
    If ``min_active`` is given and the event would leave fewer active weights,
    the shortfall is regrown at the globally largest-momentum free positions.
    """
    values = params.values.copy()
    bits = mask.bits.copy()
    mom_abs = np.abs(momentum.values.astype(np.float64))
    shares = momentum_shares(momentum.values, mask)
    before = mask.active_weights

    applied = []
    for q in quotas:
        a, b = mask.weight_span(q.layer)
        active = np.flatnonzero(bits[a:b])
        c = min(q.count, max(active.size - 1, 0))
        if c != q.count:
            q = LayerQuota(q.layer, q.active, q.pq, q.lower_bound, c)
        applied.append(q)
        if c <= 0:
            continue
        mags = np.abs(values[a:b][active])
        drop = active[np.argsort(mags, kind="stable")[:c]] + a
        bits[drop] = 0
        values[drop] = 0

    omega = sum(q.count for q in applied)
    regrown = []
    for l, share in enumerate(shares):
        a, b = mask.weight_span(l)
        k = int(math.floor(share * omega))
        pick = _top_inactive(mom_abs[a:b], bits[a:b] == 0, k) + a
        bits[pick] = 1
        values[pick] = 0
        regrown.append(int(pick.size))

    weight_pos = params.weight_positions()
    active_now = int(bits[weight_pos].sum())
    topped = 0
    if min_active is not None and active_now < min_active:
        free = (bits == 0) & weight_pos
        pick = _top_inactive(mom_abs, free, min_active - active_now)
        bits[pick] = 1
        values[pick] = 0
        topped = int(pick.size)
        active_now += topped

    new_mask = Mask(mask.segments, bits)
    new_params = params.like(values * bits.astype(values.dtype))
    event = PruneEvent(applied, regrown, topped, before, active_now)
    return new_params, new_mask, event


def decay_prune_rate(p_m: float) -> float:
    return 0.5 * p_m
