"""Wiring between configuration, data, constellation, SR and PFL."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import pfl
from .config import ExperimentConfig
from .constellation import LinkBudget, build_walker_star, topology_series
from .data import ImageSet, generate_synthetic, load_directory, train_test_split
from .partition import dirichlet_partition, personalized_test_indices
from .sr import (
    SrCohort,
    SrModel,
    bicubic_upscale,
    box_downsample,
    psnr,
    select_satellites,
    sr_forward,
    sr_train_round,
    ssim,
)

log = logging.getLogger(__name__)

CLASSIFIER_OFFSET = 0.5


def load_dataset(cfg: ExperimentConfig) -> ImageSet:
    ds = cfg.dataset
    if ds.source == "directory":
        data = load_directory(ds.path)
    else:
        data = generate_synthetic(ds.synthetic_spec(cfg.experiment.seed))
    if data.images.shape[-1] % cfg.sr.scale or data.images.shape[-2] % cfg.sr.scale:
        raise ValueError("image size must be divisible by the SR scale")
    return data


def split_dataset(cfg: ExperimentConfig, data: ImageSet) -> tuple[ImageSet, ImageSet]:
    return train_test_split(data, cfg.dataset.test_fraction, cfg.experiment.seed)


# ----------------------------------------------------------------------- SR


@dataclass
class SrRoundRow:
    round: int
    loss: float
    psnr_sr: float
    psnr_bicubic: float
    ssim_sr: float
    ssim_bicubic: float


@dataclass
class SrRun:
    model: SrModel
    cohort_ids: list[int]
    rows: list[SrRoundRow] = field(default_factory=list)


def sr_inputs(images: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic-upscaled versions of the box-downsampled images."""
    return bicubic_upscale(box_downsample(images, scale), scale).astype(np.float32)


def sr_quality(model: SrModel | None, low_up: np.ndarray, high: np.ndarray) -> tuple[float, float]:
    pred = low_up if model is None else np.clip(sr_forward(model, low_up), 0.0, 1.0)
    return psnr(pred, high), ssim(pred, high)


def run_sr(cfg: ExperimentConfig, train: ImageSet, test: ImageSet, eval_every: int = 5,
           on_round=None) -> SrRun:
    """Decentralized SR training over a cohort chosen from the constellation.

    The first ``train_images`` training images are dealt round-robin to the
    cohort; quality is measured
    on the held-out split. Evaluation happens every ``eval_every`` rounds and
    at the last round (rows in between carry NaN quality columns).
    """
    sc = cfg.sr
    seed = cfg.experiment.seed
    sats = build_walker_star(cfg.constellation, seed)
    ids = select_satellites(sats, sc.cohort_size)
    log.info("SR cohort: %s", ids)
    high = train.images[: sc.train_images] if sc.train_images else train.images
    low_all = sr_inputs(high, sc.scale)
    shards = [np.arange(i, len(high), len(ids)) for i in range(len(ids))]
    cohort = SrCohort(ids, [low_all[s] for s in shards], [high[s] for s in shards])
    model = SrModel.init(sc.hyper(train.images.shape[1]), np.random.default_rng([seed, 0x5E]))
    model = SrModel(model.hyper, model.params, sc.offset)
    test_low = sr_inputs(test.images, sc.scale)
    bic_psnr, bic_ssim = sr_quality(None, test_low, test.images)
    run = SrRun(model, ids)
    p, s = sr_quality(model, test_low, test.images)
    run.rows.append(SrRoundRow(0, float("nan"), p, bic_psnr, s, bic_ssim))
    tc = sc.train_config()
    for r in range(1, sc.rounds + 1):
        rngs = [np.random.default_rng([seed, r, sid]) for sid in ids]
        run.model, _, losses = sr_train_round(run.model, cohort, tc, rngs)
        if r % eval_every == 0 or r == sc.rounds:
            p, s = sr_quality(run.model, test_low, test.images)
        else:
            p = s = float("nan")
        row = SrRoundRow(r, float(np.mean(losses)), p, bic_psnr, s, bic_ssim)
        run.rows.append(row)
        if on_round is not None:
            on_round(row)
    return run


# ---------------------------------------------------------------------- PFL


def preprocess(images: np.ndarray, mode: str, scale: int, sr_model: SrModel | None) -> np.ndarray:
    """Turn acquired high-resolution rasters into classifier inputs.

    ``original`` keeps the low-resolution acquisition, ``bicubic`` upscales
    it and ``sr`` additionally runs the SR network.
    """
    low = box_downsample(images, scale).astype(np.float32)
    if mode == "original":
        return low
    if mode == "bicubic":
        return pfl.sr_preprocess(low, None, scale)
    if mode == "sr":
        if sr_model is None:
            raise ValueError("sr preprocessing needs a trained SR model")
        return np.clip(pfl.sr_preprocess(low, sr_model, scale), 0.0, 1.0).astype(np.float32)
    raise ValueError(f"unknown preprocess mode {mode!r}")


@dataclass
class PflSetup:
    sats: list
    datasets: list[pfl.SatelliteData]
    global_test: ImageSet
    topologies: list
    budget: LinkBudget


def pfl_setup(cfg: ExperimentConfig, train: ImageSet, test: ImageSet, mode: str | None = None,
              sr_model: SrModel | None = None) -> PflSetup:
    pc = cfg.pfl
    seed = cfg.experiment.seed
    mode = mode or pc.preprocess
    sats_all = build_walker_star(cfg.constellation, seed)
    if pc.satellites > len(sats_all):
        raise ValueError("more PFL satellites than the constellation holds")
    chosen = sorted(select_satellites(sats_all, pc.satellites))
    sats = [sats_all[i] for i in chosen]
    # the classifier sees zero-centred intensities
    x_train = preprocess(train.images, mode, cfg.sr.scale, sr_model) - CLASSIFIER_OFFSET
    x_test = preprocess(test.images, mode, cfg.sr.scale, sr_model) - CLASSIFIER_OFFSET
    train_p = ImageSet(x_train, train.labels, train.classes)
    test_p = ImageSet(x_test, test.labels, test.classes)
    plan = dirichlet_partition(train.labels, pc.satellites, pc.dirichlet_alpha, seed)
    rng = np.random.default_rng([seed, 0x7E57])
    datasets = []
    for idx in plan.indices:
        t_idx = personalized_test_indices(test.labels, train.labels[idx], train.classes,
                                          pc.test_per_satellite, rng)
        datasets.append(pfl.SatelliteData(train_p.subset(idx), test_p.subset(t_idx)))
    topologies = topology_series(sats, cfg.constellation, pc.rounds, pc.topology)
    return PflSetup(sats, datasets, test_p, topologies, LinkBudget.from_config(cfg.constellation))


def run_pfl_experiment(cfg: ExperimentConfig, setup: PflSetup, jobs: int = 1,
                       on_round=None) -> pfl.PflResult:
    pc = cfg.pfl
    config = pc.pfl_config(cfg.prune, cfg.experiment.seed, jobs)
    net = pfl.classifier_network(setup.global_test.images.shape[1], classes=setup.global_test.classes)
    return pfl.run_pfl(config, setup.sats, setup.datasets, setup.topologies, setup.budget,
                       net=net, global_test=setup.global_test, on_round=on_round)
