"""Round-synchronous decentralized personalized FL with masks and dynamic pruning."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import pruning
from .constellation import LinkBudget, SatelliteState, TimeVaryingTopology, link_rate, round_delay
from .data import ImageSet
from .nn import LayerShape, LayerSpec, MomentumState, Network, NonFiniteLossError, ParamVector, sgd_momentum_step
from .pruning import Mask, PruneEvent, PruneHyperparams, PruneSchedule
from .sr import SrModel, bicubic_upscale, sr_forward

log = logging.getLogger(__name__)


def classifier_network(channels: int = 3, widths: Sequence[int] = (8, 16, 16, 32), classes: int = 10,
                       strides: Sequence[int] | None = None) -> Network:
    """3x3 conv layers, global average pooling and a dense head.

    Every conv strides by 2 unless ``strides`` says otherwise, which gives
    four layers a 31 px receptive field."""
    strides = strides or [2] * len(widths)
    if len(strides) != len(widths):
        raise ValueError("need one stride per conv layer")
    layers = []
    cin = channels
    for i, (w, st) in enumerate(zip(widths, strides)):
        layers.append(LayerSpec(LayerShape(i, "conv", cin, w, 3), stride=st))
        cin = w
    layers.append(LayerSpec(LayerShape(len(widths), "dense", cin, classes), activation=False))
    return Network(layers)


@dataclass(frozen=True)
class PflConfig:
    rounds: int = 20
    local_epochs: int = 1
    lr: float = 0.05
    batch_size: int = 16
    momentum: float = 0.9
    topology: str = "ring"
    dense: bool = False
    jobs: int = 1
    seed: int = 0
    prune: PruneHyperparams = field(default_factory=PruneHyperparams)

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("need at least one round")
        if self.local_epochs < 1:
            raise ValueError("need at least one local epoch")

    @property
    def target_sparsity(self) -> float:
        return 0.0 if self.dense else self.prune.target_sparsity


@dataclass
class SatelliteData:
    train: ImageSet
    test: ImageSet


@dataclass
class SatelliteRoundState:
    sat_id: int
    params: ParamVector
    mask: Mask
    momentum: MomentumState
    data: SatelliteData
    prune_rate: float
    start: np.ndarray  # model at round 0
    first: np.ndarray | None = None  # model after round 1
    previous: np.ndarray | None = None
    votes: list[int] = field(default_factory=list)
    last_loss: float = float("nan")

    @property
    def sparsity(self) -> float:
        return self.mask.sparsity


@dataclass
class RoundMetrics:
    round: int
    satellite: int
    accuracy: float
    global_accuracy: float
    loss: float
    sparsity: float
    comm_delay_s: float
    comp_delay_s: float
    energy_j: float
    pruned_this_round: int


METRIC_COLUMNS = [f.name for f in fields(RoundMetrics)]


@dataclass
class PflResult:
    metrics: list[RoundMetrics]
    states: list[SatelliteRoundState]
    schedule: PruneSchedule
    initial_time: int
    prune_log: list[tuple]

    def round_mean(self, column: str, rnd: int | None = None) -> float:
        rnd = max(m.round for m in self.metrics) if rnd is None else rnd
        return float(np.mean([getattr(m, column) for m in self.metrics if m.round == rnd]))


# -------------------------------------------------------------- operations


def neighbor_aggregate(models: Sequence[np.ndarray], masks: Sequence[np.ndarray], own: int) -> np.ndarray:
    """Mask-normalised neighbourhood average, re-masked with the own mask.

    ``models``/``masks`` list the neighbourhood including the satellite itself
    (at position ``own``), in summation order. Coordinates that no neighbour
    holds keep the satellite's own value.
    """
    if len(models) != len(masks) or not models:
        raise ValueError("need one mask per model and a non-empty neighbourhood")
    size = models[own].size
    total = np.zeros(size, dtype=np.float64)
    count = np.zeros(size, dtype=np.float64)
    for w, h in zip(models, masks):
        if w.size != size or h.size != size:
            raise ValueError("layout mismatch in neighbourhood")
        total += w.astype(np.float64)
        count += h
    own_w = models[own].astype(np.float64)
    avg = np.divide(total, count, out=own_w.copy(), where=count > 0)
    return (avg * masks[own]).astype(models[own].dtype)


def masked_local_train(net: Network, params: ParamVector, mask: Mask, momentum: MomentumState,
                       data: ImageSet, *, epochs: int, lr: float, batch_size: int,
                       rng: np.random.Generator):
    """SGD with momentum on the full gradient; the model is re-masked after
    every batch so inactive coordinates never leave zero."""
    bits = mask.bits.astype(params.dtype)
    params = params.like(params.values * bits)
    losses: list[float] = []
    for _ in range(epochs):
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            loss, grad = net.loss_and_grad(params, data.images[idx], data.labels[idx], "xent")
            params, momentum = sgd_momentum_step(params, grad, momentum, lr)
            params = params.like(params.values * bits)
            losses.append(loss)
    return params, momentum, float(np.mean(losses)) if losses else float("nan")


def evaluate(net: Network, params: ParamVector, data: ImageSet, batch_size: int = 64) -> float:
    if len(data) == 0:
        raise ValueError("evaluation needs a non-empty test split")
    correct = 0
    for start in range(0, len(data), batch_size):
        logits = net.forward(params, data.images[start : start + batch_size])
        correct += int((logits.argmax(axis=1) == data.labels[start : start + batch_size]).sum())
    return correct / len(data)


def sr_preprocess(images: np.ndarray, model: SrModel | None, factor: int) -> np.ndarray:
    """Bicubic upscaling followed by the SR network (skipped when ``model`` is None)."""
    if len(images) == 0:
        return images
    up = bicubic_upscale(images, factor).astype(np.float32)
    if model is None:
        return up
    return sr_forward(model, up).astype(np.float32)


def payload_bits(mask: Mask) -> int:
    """32-bit values for every transmitted coordinate, plus a one-bit-per-
    weight bitmap whenever some weight is inactive. A full mask needs no
    bitmap, so a dense model costs exactly 32 bits per parameter."""
    bitmap = mask.total_weights if mask.active_weights < mask.total_weights else 0
    return 32 * mask.nnz + bitmap


def work_per_sample(net: Network, mask: Mask, height: int, width: int) -> float:
    """Training FLOPs for one sample: forward + backward ~ 3x forward, 2 FLOPs per MAC."""
    macs = net.macs_per_sample(height, width)
    dens = [c / s.weight_count for c, s in zip(mask.per_layer_counts, mask.segments)]
    return 6.0 * float(sum(m * d for m, d in zip(macs, dens)))


# -------------------------------------------------------------------- driver


def init_states(net: Network, config: PflConfig, datasets: Sequence[SatelliteData],
                sat_ids: Sequence[int]) -> list[SatelliteRoundState]:
    shared = net.init_params(np.random.default_rng([config.seed, 0xC1A55]))
    states = []
    for n, data in zip(sat_ids, datasets):
        mask = pruning.init_mask_sfn(net.segments, config.target_sparsity, seed=config.seed * 100003 + n)
        params = pruning.apply_mask(shared, mask)
        states.append(
            SatelliteRoundState(
                sat_id=n,
                params=params,
                mask=mask,
                momentum=MomentumState.zeros_like(params, config.momentum),
                data=data,
                prune_rate=config.prune.prune_rate,
                start=params.values.astype(np.float64),
            )
        )
    return states


def run_pfl(
    config: PflConfig,
    sats: Sequence[SatelliteState],
    datasets: Sequence[SatelliteData],
    topologies: Sequence[TimeVaryingTopology],
    budget: LinkBudget,
    net: Network | None = None,
    global_test: ImageSet | None = None,
    on_round: Callable[[int, list[SatelliteRoundState]], None] | None = None,
) -> PflResult:
    """``sats``, ``datasets`` and the topology rows are indexed alike.

    Per round: aggregate with neighbours, train locally under the mask,
    vote, fix the pruning schedule at the first vote crossing, and prune /
    regrow at scheduled rounds."""
    if len(topologies) < config.rounds:
        raise ValueError("need one topology snapshot per round")
    if len(sats) != len(datasets):
        raise ValueError("need one dataset per participating satellite")
    n_sats = len(datasets)
    net = net or classifier_network(datasets[0].train.images.shape[1], classes=datasets[0].train.classes)
    hyper = config.prune
    states = init_states(net, config, datasets, [s.sat_id for s in sats])
    total_weights = states[0].mask.total_weights
    target_active = pruning.target_active_count(total_weights, config.target_sparsity)
    rates = [link_rate(budget, s) for s in sats]
    height, width = datasets[0].train.images.shape[2:]

    schedule = PruneSchedule(config.rounds, (), ())
    t_hat: int | None = None
    metrics: list[RoundMetrics] = []
    prune_log: list[tuple] = []
    pool = ThreadPoolExecutor(config.jobs) if config.jobs > 1 else None

    def train_one(n: int, r: int, start: ParamVector):
        st = states[n]
        rng = np.random.default_rng([config.seed, r, st.sat_id])
        try:
            return masked_local_train(
                net, start, st.mask, st.momentum, st.data.train,
                epochs=config.local_epochs, lr=config.lr, batch_size=config.batch_size, rng=rng,
            )
        except NonFiniteLossError as exc:
            raise NonFiniteLossError(f"round {r}, satellite {st.sat_id}: {exc}") from exc

    try:
        for r in range(1, config.rounds + 1):
            neighbours = topologies[r - 1].neighbor_sets
            snapshot = [st.params.values for st in states]
            masks = [st.mask.bits for st in states]
            aggregated = []
            for n in range(n_sats):
                group = sorted(set(neighbours[n]) | {n})
                agg = neighbor_aggregate([snapshot[j] for j in group], [masks[j] for j in group], group.index(n))
                aggregated.append(states[n].params.like(agg))

            if pool is None:
                trained = [train_one(n, r, aggregated[n]) for n in range(n_sats)]
            else:
                trained = list(pool.map(lambda n: train_one(n, r, aggregated[n]), range(n_sats)))

            votes = []
            for st, (params, mom, loss) in zip(states, trained):
                st.params, st.momentum, st.last_loss = params, mom, loss
                current = params.values.astype(np.float64)
                if st.first is None:
                    st.first = current
                prev = st.previous if st.previous is not None else st.start
                c = pruning.vote(current, prev, st.first, st.start, hyper.vote_threshold)
                st.votes.append(c)
                st.previous = current
                votes.append(c)

            pruned_counts = [0] * n_sats
            if config.target_sparsity > 0 and r in schedule:
                for n, st in enumerate(states):
                    # one event per scheduled round while the satellite is not above target sparsity
                    if st.mask.active_weights < target_active:
                        continue
                    quotas = pruning.layer_quotas(st.params, st.mask, hyper)
                    st.params, st.mask, event = pruning.prune_and_regrow(
                        st.params, st.mask, st.momentum, quotas, min_active=target_active
                    )
                    st.prune_rate = pruning.decay_prune_rate(st.prune_rate)
                    pruned_counts[n] = event.pruned
                    for q, grown in zip(event.quotas, event.regrown):
                        prune_log.append((r, st.sat_id, q.layer, q.active, q.pq, q.lower_bound, q.count, grown))

            if t_hat is None and pruning.vote_crosses(float(np.mean(votes)), hyper.vote_ratio, hyper.vote_comparison):
                t_hat = r
                schedule = pruning.prune_schedule(t_hat, hyper.sched_alpha, hyper.sched_beta,
                                                  hyper.sched_gamma, config.rounds)
                log.info("initial pruning time %d, schedule %s", t_hat, schedule.times)

            for n, st in enumerate(states):
                acc = evaluate(net, st.params, st.data.test)
                gacc = evaluate(net, st.params, global_test) if global_test is not None else float("nan")
                comm, comp, energy = round_delay(
                    payload_bits(st.mask),
                    rates[n],
                    config.local_epochs,
                    len(st.data.train),
                    work_per_sample(net, st.mask, height, width),
                    sats[n].compute_capacity,
                    sats[n].transmit_power,
                    sats[n].compute_power,
                )
                metrics.append(
                    RoundMetrics(r, st.sat_id, acc, gacc, st.last_loss, st.sparsity, comm, comp, energy,
                                 pruned_counts[n])
                )
            if on_round is not None:
                on_round(r, states)
    finally:
        if pool is not None:
            pool.shutdown()

    if t_hat is None:
        t_hat = config.rounds
    return PflResult(metrics, states, schedule, t_hat, prune_log)


def dense_baseline(config: PflConfig, sats, datasets, topologies, budget, **kwargs) -> PflResult:
    """Same loop with all-ones masks and pruning disabled."""
    return run_pfl(replace(config, dense=True), sats, datasets, topologies, budget, **kwargs)


# ------------------------------------------------------------------- output


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metrics_csv(path: Path | str, metrics: Sequence[RoundMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for m in metrics:
            w.writerow([_fmt(v) for v in asdict(m).values()])


def write_prune_log(path: Path | str, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "satellite", "layer", "d_l", "I_l", "r_l", "c_l", "regrown"])
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def summarize(result: PflResult) -> dict:
    last = max(m.round for m in result.metrics)
    return {
        "rounds": last,
        "satellites": len(result.states),
        "final_mean_accuracy": result.round_mean("accuracy", last),
        "final_mean_global_accuracy": result.round_mean("global_accuracy", last),
        "final_mean_sparsity": result.round_mean("sparsity", last),
        "total_comm_delay_s": float(sum(m.comm_delay_s for m in result.metrics)),
        "total_comp_delay_s": float(sum(m.comp_delay_s for m in result.metrics)),
        "total_energy_j": float(sum(m.energy_j for m in result.metrics)),
        "initial_prune_time": result.initial_time,
        "prune_times": list(result.schedule.times),
        "prune_events": len({(row[0], row[1]) for row in result.prune_log}),
    }
