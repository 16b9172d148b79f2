"""Training-2: distill the normalized GAM into a fresh autoregressive model.

Exact samples of ``p_lam`` come from rejection sampling with the GAM's base
model as proposal.  The cyclic regime improves the proposal between batches
and refits ``lam`` against it, so the GAM keeps the form
``proposal(x) * exp(lam . phi(x))`` and the feature bound stays valid.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .armodel import ArModel, TrainConfig, single_update, train_ar
from .features import decode
from .gam import Gam, LowAcceptanceError, ProposalPool, Training1Config, rejection_sample, train_gam
from .pfsa import write_dataset

log = logging.getLogger(__name__)


class BoundViolationError(RuntimeError):
    pass


@dataclass
class DistillConfig:
    ds_size: int = 20_000
    batch_size: int = 500
    val_fraction: float = 0.1
    mode: str = "two_stage"
    seed: int = 0
    draw_cap: int = 10**8
    merge_true: bool = False
    acc_patience: int = 3
    acc_min_rel: float = 0.05

    def __post_init__(self):
        if self.ds_size <= 0 or self.batch_size <= 0:
            raise ValueError("distilled sizes must be positive")
        if self.acc_patience < 0:
            raise ValueError("acc_patience must be >= 0")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.mode not in ("two_stage", "cyclic"):
            raise ValueError(f"unknown distillation mode {self.mode!r}")


@dataclass
class DistillStats:
    acceptance_rates: list = field(default_factory=list)
    draws: int = 0
    seconds: float = 0.0
    n_train: int = 0
    n_val: int = 0
    proposal_updates: int = 0


def _split(x: np.ndarray, val_fraction: float) -> tuple[list[str], list[str]]:
    n_val = int(round(len(x) * val_fraction))
    strings = decode(x)
    return strings[: len(x) - n_val], strings[len(x) - n_val :]


def distill_batch(
    g: Gam,
    count: int,
    rng,
    proposal: ArModel | None = None,
    log_beta: float | None = None,
    val_fraction: float = 0.1,
    draw_cap: int = 10**8,
) -> tuple[list[str], list[str], float]:
    """Rejection-sample ``count`` exact draws from the normalized GAM.

    With the GAM's own base model as proposal the acceptance ratio is
    ``exp(lam . phi(x))`` bounded by ``exp(sum(max(lam, 0)))``.  Any other
    proposal needs an explicit ``log_beta`` bounding
    ``log P(x) - log proposal(x)``; a draw exceeding it raises.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(rng)
    if proposal is None or proposal is g.r:
        pool = ProposalPool(g.r, g.spec, rng)
        x, _, draws = rejection_sample(pool, g.lam, count, rng, g.log_beta, draw_cap)
    else:
        if log_beta is None:
            raise ValueError("a foreign proposal needs an explicit log_beta bound")
        x, draws = _rejection_foreign(g, proposal, count, rng, log_beta, draw_cap)
    train, val = _split(x, val_fraction)
    return train, val, count / draws


def _rejection_foreign(g, proposal, count, rng, log_beta, draw_cap, chunk=4096):
    kept, draws = [], 0
    while sum(len(k) for k in kept) < count:
        if draws >= draw_cap:
            raise LowAcceptanceError(sum(len(k) for k in kept), draws)
        x = proposal.sample_matrix(min(chunk, draw_cap - draws), rng)
        log_ratio = g.log_potentials(x) - proposal.log_probs(x)
        if np.any(log_ratio > log_beta + 1e-9):
            raise BoundViolationError(f"log ratio {log_ratio.max():.4f} exceeds log_beta {log_beta:.4f}")
        acc = np.flatnonzero(np.log(rng.random(len(x))) < log_ratio - log_beta)
        need = count - sum(len(k) for k in kept)
        if len(acc) >= need:
            draws += acc[need - 1] + 1
            kept.append(x[acc[:need]])
            break
        draws += len(x)
        kept.append(x[acc])
    return np.concatenate(kept), draws


def distill_two_stage(
    g: Gam,
    cfg: DistillConfig,
    ar_cfg: TrainConfig,
    D: Sequence[str] | None = None,
    V: Sequence[str] | None = None,
) -> tuple[ArModel, DistillStats, tuple[list[str], list[str]]]:
    """One distillation batch of ``ds_size`` draws with the fixed proposal ``r``,
    then a fresh model trained on it.  ``D``/``V`` are merged in only if
    ``cfg.merge_true`` is set."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    train, val, rate = distill_batch(g, cfg.ds_size, rng, val_fraction=cfg.val_fraction,
                                     draw_cap=cfg.draw_cap)
    stats = DistillStats(acceptance_rates=[rate], draws=int(round(cfg.ds_size / rate)))
    if cfg.merge_true:
        if D is None or V is None:
            raise ValueError("merge_true requires D and V")
        train, val = train + list(D), val + list(V)
    pi = train_ar(train, val, ar_cfg)
    stats.n_train, stats.n_val = len(train), len(val)
    stats.seconds = time.perf_counter() - t0
    return pi, stats, (train, val)


def _acceptance_stalled(rates: list[float], patience: int, min_rel: float) -> bool:
    best, wait = 0.0, 0
    for rate in rates:
        if rate > best * (1 + min_rel):
            best, wait = rate, 0
        else:
            wait += 1
    return wait >= patience


def distill_cyclic(
    g: Gam,
    D: Sequence[str],
    V: Sequence[str],
    cfg: DistillConfig,
    ar_cfg: TrainConfig,
    t1_cfg: Training1Config,
) -> tuple[ArModel, DistillStats, tuple[list[str], list[str]]]:
    """Distill in batches while improving the proposal.

    After each batch (until the acceptance rate stalls) the proposal takes one
    Adam pass over the batch and ``lam`` is refit against the new proposal.
    The true ``D``/``V`` are appended before training the final model.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    train_target = cfg.ds_size - int(round(cfg.ds_size * cfg.val_fraction))
    d_train: list[str] = []
    d_val: list[str] = []
    stats = DistillStats()
    # acc_patience == 0 means the proposal is never improved
    stalled = cfg.acc_patience == 0
    while len(d_train) < train_target:
        remaining = train_target - len(d_train)
        count = min(cfg.batch_size, int(math.ceil(remaining / (1 - cfg.val_fraction))))
        tb, vb, rate = distill_batch(g, count, rng, val_fraction=cfg.val_fraction,
                                     draw_cap=cfg.draw_cap)
        d_train += tb
        d_val += vb
        stats.acceptance_rates.append(rate)
        stats.draws += int(round(count / rate))
        log.info("cyclic batch %d: acceptance %.4f", len(stats.acceptance_rates), rate)
        if not stalled:
            proposal = single_update(g.r, tb, ar_cfg, rng)
            t1 = Training1Config(**{**asdict(t1_cfg), "seed": int(rng.integers(2**31))})
            g = train_gam(proposal, D, V, t1, g.spec)
            stats.proposal_updates += 1
            stalled = _acceptance_stalled(stats.acceptance_rates, cfg.acc_patience, cfg.acc_min_rel)
    d_train = d_train[:train_target] + list(D)
    d_val = d_val + list(V)
    pi = train_ar(d_train, d_val, ar_cfg)
    stats.n_train, stats.n_val = len(d_train), len(d_val)
    stats.seconds = time.perf_counter() - t0
    return pi, stats, (d_train, d_val)


def write_distilled(out_dir, train: Sequence[str], val: Sequence[str], meta: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(out / "distilled_train.txt", train)
    write_dataset(out / "distilled_val.txt", val)
    with open(out / "distilled_meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, default=str)
