"""Three-layer super-resolution CNN and its decentralized training loop."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .nn import LayerShape, LayerSpec, MomentumState, Network, ParamVector, ShapeError, sgd_momentum_step

SUPPORTED_FACTORS = (2, 4)


# ------------------------------------------------------------ interpolation


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    near = ((a + 2) * x - (a + 3)) * x * x + 1
    far = ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


@lru_cache(maxsize=32)
def _resize_matrix(n_in: int, factor: int) -> np.ndarray:
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    base = np.floor(src).astype(int)
    mat = np.zeros((n_out, n_in))
    for tap in range(-1, 3):
        idx = base + tap
        w = _cubic(src - idx)
        np.add.at(mat, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), w)
    mat.setflags(write=False)
    return mat


def bicubic_upscale(image: np.ndarray, factor: int) -> np.ndarray:
    """Catmull-Rom upscaling of the last two axes with edge clamping."""
    if factor not in SUPPORTED_FACTORS:
        raise ValueError(f"scale factor must be one of {SUPPORTED_FACTORS}")
    image = np.asarray(image)
    rows = _resize_matrix(image.shape[-2], factor)
    cols = _resize_matrix(image.shape[-1], factor)
    out = np.einsum("ih,...hw,jw->...ij", rows, image.astype(np.float64), cols, optimize=True)
    return out.astype(image.dtype if image.dtype.kind == "f" else np.float64)


def box_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    *lead, h, w = image.shape
    if h % factor or w % factor:
        raise ShapeError("image size must be divisible by the scale factor")
    return image.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-1, -3))


def make_pairs(high_res: np.ndarray, factor: int) -> tuple[np.ndarray, np.ndarray]:
    """(bicubic-upscaled low-res input, high-res target), same dims."""
    low = box_downsample(high_res, factor)
    return bicubic_upscale(low, factor).astype(high_res.dtype), high_res


# -------------------------------------------------------------------- model


@dataclass(frozen=True)
class SrHyper:
    channels: int = 3
    d1: int = 16
    d2: int = 8
    k1: int = 9
    k2: int = 1
    k3: int = 5

    def __post_init__(self):
        if self.k2 != 1:
            raise ValueError("the mapping layer uses 1x1 filters")


def sr_network(hyper: SrHyper) -> Network:
    c, d1, d2 = hyper.channels, hyper.d1, hyper.d2
    return Network(
        [
            LayerSpec(LayerShape(0, "conv", c, d1, hyper.k1)),
            LayerSpec(LayerShape(1, "conv", d1, d2, hyper.k2)),
            LayerSpec(LayerShape(2, "conv", d2, c, hyper.k3), activation=False),
        ]
    )


@dataclass
class SrModel:
    """SR network parameters plus the pixel offset the network works around.

    Images are shifted by ``-offset`` before the first layer and by
    ``+offset`` after the last one, so the convolutions see zero-centred
    intensities.
    """

    hyper: SrHyper
    params: ParamVector
    offset: float = 0.5

    @classmethod
    def init(cls, hyper: SrHyper, rng: np.random.Generator, dtype=np.float32) -> "SrModel":
        return cls(hyper, sr_network(hyper).init_params(rng, dtype))

    @property
    def network(self) -> Network:
        return sr_network(self.hyper)

    def with_params(self, params: ParamVector) -> "SrModel":
        return SrModel(self.hyper, params, self.offset)


def sr_forward(model: SrModel, low: np.ndarray, batch_size: int = 16) -> np.ndarray:
    low = np.asarray(low)
    single = low.ndim == 3
    x = low[None] if single else low
    if x.shape[1] != model.hyper.channels:
        raise ShapeError(f"expected {model.hyper.channels} channels, got {x.shape[1]}")
    net = model.network
    outs = [
        net.forward(model.params, x[i : i + batch_size] - model.offset) + model.offset
        for i in range(0, len(x), batch_size)
    ]
    out = np.concatenate(outs) if outs else np.zeros_like(x, dtype=model.params.dtype)
    return out[0] if single else out


def sr_local_loss(model: SrModel, low: np.ndarray, high: np.ndarray) -> float:
    """Mean over pairs of the summed squared reconstruction error."""
    if len(low) == 0:
        raise ValueError("local loss needs at least one image pair")
    pred = sr_forward(model, low).astype(np.float64)
    err = (pred - high.astype(np.float64)) ** 2
    return float(err.reshape(len(low), -1).sum(axis=1).mean())


# ------------------------------------------------------------ local training


def _random_crops(low, high, size, rng):
    n, _, h, w = low.shape
    if size is None or size >= min(h, w):
        return low, high
    ys = rng.integers(0, h - size + 1, size=n)
    xs = rng.integers(0, w - size + 1, size=n)
    lo = np.stack([low[i, :, y : y + size, x : x + size] for i, (y, x) in enumerate(zip(ys, xs))])
    hi = np.stack([high[i, :, y : y + size, x : x + size] for i, (y, x) in enumerate(zip(ys, xs))])
    return lo, hi


def local_sgd(net: Network, params: ParamVector, low, high, *, lr, epochs, batch_size, rng,
              momentum: MomentumState, crop: int | None = None, offset: float = 0.0):
    """Minibatch SGD on per-element MSE.

    Returns (params, momentum, last-epoch mean loss).
    """
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(low))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            lo, hi = _random_crops(low[idx], high[idx], crop, rng)
            loss, grad = net.loss_and_grad(params, lo - offset, hi - offset, "mse")
            params, momentum = sgd_momentum_step(params, grad, momentum, lr)
            losses.append(loss)
    return params, momentum, float(np.mean(losses)) if losses else float("nan")


def weighted_average(models: Sequence[ParamVector], sizes: Sequence[int]) -> ParamVector:
    """Data-size weighted mean, accumulated in 64-bit in list order."""
    total = float(sum(sizes))
    acc = np.zeros(len(models[0]), dtype=np.float64)
    for p, n in zip(models, sizes):
        acc += (n / total) * p.values.astype(np.float64)
    return models[0].like(acc.astype(models[0].dtype))


def select_satellites(sats, max_count: int) -> list[int]:
    """Round-robin over orbits in index order, taking the highest-capacity
    unselected satellite of each orbit (ties to the lowest id)."""
    if max_count > len(sats):
        raise ValueError("cannot select more satellites than exist")
    by_orbit: dict[int, list] = {}
    for s in sats:
        by_orbit.setdefault(s.orbit_id, []).append(s)
    for members in by_orbit.values():
        members.sort(key=lambda s: (-s.compute_capacity, s.sat_id))
    chosen: list[int] = []
    depth = 0
    while len(chosen) < max_count:
        for g in sorted(by_orbit):
            if depth < len(by_orbit[g]):
                chosen.append(by_orbit[g][depth].sat_id)
                if len(chosen) >= max_count:
                    break
        depth += 1
    return chosen


@dataclass
class SrCohort:
    sat_ids: list[int]
    low: list[np.ndarray]
    high: list[np.ndarray]
    momentum: list[MomentumState | None] | None = None

    def __post_init__(self):
        if self.momentum is None:
            self.momentum = [None] * len(self.sat_ids)

    @property
    def sizes(self) -> list[int]:
        return [len(x) for x in self.low]


@dataclass(frozen=True)
class SrTrainConfig:
    rounds: int = 30
    lr: float = 2.0
    local_epochs: int = 5
    batch_size: int = 4
    smoothing: float = 0.9
    crop: int | None = 32


def sr_train_round(model: SrModel, cohort: SrCohort, cfg: SrTrainConfig, rngs):
    """Every cohort member trains from the current global model; the new
    global model is the data-size weighted average of the local models."""
    net = model.network
    local, losses = [], []
    for i, rng in zip(range(len(cohort.sat_ids)), rngs):
        mom = cohort.momentum[i]
        if mom is None:
            mom = MomentumState.zeros_like(model.params, cfg.smoothing)
        params, cohort.momentum[i], loss = local_sgd(
            net, model.params.copy(), cohort.low[i], cohort.high[i],
            lr=cfg.lr, epochs=cfg.local_epochs, batch_size=cfg.batch_size,
            rng=rng, momentum=mom, crop=cfg.crop, offset=model.offset,
        )
        local.append(params)
        losses.append(loss)
    return model.with_params(weighted_average(local, cohort.sizes)), local, losses


def train_sr(model: SrModel, cohort: SrCohort, cfg: SrTrainConfig, seed: int,
             on_round=None) -> SrModel:
    for r in range(1, cfg.rounds + 1):
        rngs = [np.random.default_rng([seed, r, sid]) for sid in cohort.sat_ids]
        model, local, losses = sr_train_round(model, cohort, cfg, rngs)
        if on_round is not None:
            on_round(r, model, local, losses)
    return model


# ------------------------------------------------------------------ metrics


def psnr(pred: np.ndarray, target: np.ndarray, max_val: float = 1.0) -> float:
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(target, np.float64)) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_val**2 / mse)


def ssim(pred: np.ndarray, target: np.ndarray, max_val: float = 1.0, window: int = 8) -> float:
    """Mean SSIM over all ``window x window`` patches of each channel."""
    x = np.asarray(pred, np.float64)
    y = np.asarray(target, np.float64)
    if x.shape != y.shape:
        raise ShapeError("ssim inputs must share dims")
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    xw = sliding_window_view(x, (window, window), axis=(-2, -1))
    yw = sliding_window_view(y, (window, window), axis=(-2, -1))
    mx = xw.mean(axis=(-1, -2))
    my = yw.mean(axis=(-1, -2))
    vx = (xw * xw).mean(axis=(-1, -2)) - mx * mx
    vy = (yw * yw).mean(axis=(-1, -2)) - my * my
    cov = (xw * yw).mean(axis=(-1, -2)) - mx * my
    s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    # channel-wise mean, then across channels and images
    return float(s.reshape(-1, s.shape[-2] * s.shape[-1]).mean(axis=1).mean())

