"""GAM potential ``P(x) = r(x) * exp(lam . phi(x))`` and moment-matching training of ``lam``.

Model moments under the normalized GAM are estimated with ``r`` as proposal,
either by rejection sampling (``rs``) or self-normalized importance sampling
(``snis``).  Small ``n`` admits exact enumeration, used as a test oracle.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .armodel import ArModel
from .features import FeatureSpec, empirical_moments, encode, phi_matrix

log = logging.getLogger(__name__)

MAX_EXACT_N = 12


class LowAcceptanceError(RuntimeError):
    """Rejection sampler hit its proposal-draw cap."""

    def __init__(self, accepted: int, draws: int):
        rate = accepted / draws if draws else 0.0
        super().__init__(f"acceptance too low: {accepted} accepted in {draws} draws (rate {rate:.2e})")
        self.accepted = accepted
        self.draws = draws
        self.rate = rate


class DegenerateWeightsError(RuntimeError):
    pass


@dataclass
class Gam:
    r: ArModel
    spec: FeatureSpec
    lam: np.ndarray
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64)
        if self.lam.shape != (self.spec.dim,):
            raise ValueError(f"lambda has shape {self.lam.shape}, expected ({self.spec.dim},)")

    @property
    def n(self) -> int:
        return self.r.n

    @property
    def log_beta(self) -> float:
        """Log of the bound on exp(lam . phi) over phi in {0,1}^k."""
        return float(np.maximum(self.lam, 0.0).sum())

    def phi(self, data) -> np.ndarray:
        x = data if isinstance(data, np.ndarray) else encode(list(data))
        return phi_matrix(self.spec, x)

    def log_potentials(self, data) -> np.ndarray:
        x = data if isinstance(data, np.ndarray) else encode(list(data))
        return self.r.log_probs(x) + self.phi(x) @ self.lam

    def log_potential(self, x: str) -> float:
        if len(x) != self.n:
            raise ValueError(f"expected a string of length {self.n}, got {len(x)}")
        return float(self.log_potentials([x])[0])


def log_potential(g: Gam, x: str) -> float:
    return g.log_potential(x)


# ---------------------------------------------------------------------------
# proposal stream


class ProposalPool:
    """I.i.d. draws from a frozen proposal, consumed strictly in order.

    Draws left over after one estimate are handed to the next one, so no
    proposal sample is wasted or reused.
    """

    def __init__(self, proposal: ArModel, spec: FeatureSpec, rng, chunk: int = 4096):
        self.proposal = proposal
        self.spec = spec
        self.rng = np.random.default_rng(rng)
        self.chunk = chunk
        self._x = np.zeros((0, proposal.n), dtype=np.uint8)
        self._phi = np.zeros((0, spec.dim))
        self.total_draws = 0

    def peek(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self._x) == 0:
            x = self.proposal.sample_matrix(self.chunk, self.rng)
            self._x = x
            self._phi = phi_matrix(self.spec, x)
        return self._x, self._phi

    def consume(self, count: int) -> None:
        self._x = self._x[count:]
        self._phi = self._phi[count:]
        self.total_draws += count


def rejection_sample(
    pool: ProposalPool,
    lam: np.ndarray,
    k: int,
    rng: np.random.Generator,
    log_beta: float | None = None,
    draw_cap: int = 10**7,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Draw ``k`` exact samples of ``p_lam`` with the pool's proposal.

    Accepts a draw with probability ``exp(lam . phi(x) - log_beta)``.
    Returns (strings, phis, proposal draws used).
    """
    lam = np.asarray(lam, dtype=np.float64)
    if log_beta is None:
        log_beta = float(np.maximum(lam, 0.0).sum())
    xs, phis = [], []
    need, draws = k, 0
    while need > 0:
        if draws >= draw_cap:
            raise LowAcceptanceError(k - need, draws)
        x, ph = pool.peek()
        budget = min(len(x), draw_cap - draws)
        x, ph = x[:budget], ph[:budget]
        log_rho = ph @ lam - log_beta
        accepted = np.flatnonzero(np.log(rng.random(len(x))) < log_rho)
        if len(accepted) >= need:
            used = accepted[need - 1] + 1
            accepted = accepted[:need]
        else:
            used = len(x)
        xs.append(x[accepted])
        phis.append(ph[accepted])
        pool.consume(used)
        draws += used
        need -= len(accepted)
    return np.concatenate(xs), np.concatenate(phis), draws


def estimate_moments_rs(
    g: Gam, k: int, rng, pool: ProposalPool | None = None, draw_cap: int = 10**7
) -> tuple[np.ndarray, float]:
    """Mean feature vector of ``k`` rejection-sampled draws, and the acceptance rate."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(rng)
    if pool is None:
        pool = ProposalPool(g.r, g.spec, rng)
    _, phis, draws = rejection_sample(pool, g.lam, k, rng, g.log_beta, draw_cap)
    return phis.mean(axis=0), k / draws


@dataclass
class SnisBuffer:
    """Cached proposal samples and their features."""

    phi: np.ndarray

    @classmethod
    def fill(cls, r: ArModel, spec: FeatureSpec, size: int, rng) -> "SnisBuffer":
        return cls(phi_matrix(spec, r.sample_matrix(size, rng)))

    def __len__(self) -> int:
        return len(self.phi)


def snis_weights(lam: np.ndarray, buffer: SnisBuffer) -> np.ndarray:
    """Normalized importance weights; the proposal factor cancels against ``r``."""
    if len(buffer) == 0:
        raise ValueError("empty snis buffer")
    logw = buffer.phi @ np.asarray(lam, dtype=np.float64)
    if not np.all(np.isfinite(logw)):
        raise DegenerateWeightsError("degenerate weights")
    w = np.exp(logw - logw.max())
    total = w.sum()
    if not total > 0:
        raise DegenerateWeightsError("degenerate weights")
    return w / total


def estimate_moments_snis(g: Gam, buffer: SnisBuffer) -> np.ndarray:
    return snis_weights(g.lam, buffer) @ buffer.phi


def effective_sample_size(weights: np.ndarray) -> float:
    return float(1.0 / np.sum(weights**2))


# ---------------------------------------------------------------------------
# exact oracles


def all_strings(n: int) -> np.ndarray:
    if n > MAX_EXACT_N:
        raise ValueError(f"enumeration limited to n <= {MAX_EXACT_N}, got {n}")
    return np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.uint8).reshape(-1, n)


def exact_distribution(g: Gam) -> tuple[np.ndarray, np.ndarray]:
    """All strings with their normalized probabilities under ``p_lam``."""
    x = all_strings(g.n)
    logp = g.log_potentials(x)
    return x, np.exp(logp - logsumexp(logp))


def exact_log_partition(g: Gam) -> float:
    return float(logsumexp(g.log_potentials(all_strings(g.n))))


def exact_moments(g: Gam) -> np.ndarray:
    x, p = exact_distribution(g)
    return p @ g.phi(x)


def exact_log_likelihood(g: Gam, data) -> float:
    """Mean of ``log p_lam(x)`` over ``data``, with the exact partition function."""
    return float(np.mean(g.log_potentials(data)) - exact_log_partition(g))


# ---------------------------------------------------------------------------
# Training-1


@dataclass
class Training1Config:
    treg: str = "rs"
    alpha0: float = 10.0
    updates_per_epoch: int = 50
    rs_samples: int = 10
    snis_buffer: int = 50_000
    patience: int = 10
    min_delta: float = 1e-3
    max_epochs: int = 200
    draw_cap: int = 10**7
    include_val: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.treg not in ("rs", "snis", "exact"):
            raise ValueError(f"unknown Training-1 regime {self.treg!r}")
        if min(self.alpha0, self.updates_per_epoch, self.rs_samples, self.snis_buffer,
               self.patience, self.max_epochs, self.draw_cap) <= 0:
            raise ValueError("Training-1 hyperparameters must be positive")


def train_gam(
    r: ArModel,
    D: Sequence[str],
    V: Sequence[str],
    cfg: Training1Config,
    spec: FeatureSpec,
) -> Gam:
    """Fit ``lam`` by stochastic moment matching with a decaying step size.

    Each update moves ``lam`` along ``target - estimated model moments``.
    Training stops once the per-epoch l1 moment distance has not improved by
    ``min_delta`` for ``patience`` epochs.  The best epoch's ``lam`` is returned.
    The ``exact`` regime (enumeration, small ``n`` only) exists for testing.
    """
    if len(D) == 0:
        raise ValueError("training data must be nonempty")
    t0 = time.perf_counter()
    target = empirical_moments(spec, list(D) + (list(V) if cfg.include_val else []))
    g = Gam(r, spec, np.zeros(spec.dim))
    if spec.dim == 0:
        return g
    rng = np.random.default_rng(cfg.seed)
    pool = buffer = x_all = None
    if cfg.treg == "rs":
        pool = ProposalPool(r, spec, rng)
    elif cfg.treg == "snis":
        buffer = SnisBuffer.fill(r, spec, cfg.snis_buffer, rng)
    else:
        x_all = all_strings(r.n)
        phi_all = g.phi(x_all)
        logr_all = r.log_probs(x_all)

    best_l1, best_lam, wait = math.inf, g.lam.copy(), 0
    history = []
    for epoch in range(cfg.max_epochs):
        alpha = cfg.alpha0 / (1 + epoch)
        model_mom = np.zeros(spec.dim)
        lam_avg = np.zeros(spec.dim)
        draws_before = pool.total_draws if pool is not None else 0
        accepted = 0
        ess = []
        for b in range(1, cfg.updates_per_epoch + 1):
            if cfg.treg == "rs":
                mean_mom, _ = estimate_moments_rs(g, cfg.rs_samples, rng, pool, cfg.draw_cap)
                accepted += cfg.rs_samples
            elif cfg.treg == "snis":
                w = snis_weights(g.lam, buffer)
                mean_mom = w @ buffer.phi
                ess.append(effective_sample_size(w))
            else:
                logp = logr_all + phi_all @ g.lam
                mean_mom = np.exp(logp - logsumexp(logp)) @ phi_all
            # Incremental mean over the epoch's updates.
            model_mom = model_mom * (b - 1) / b + mean_mom / b
            g.lam = g.lam + alpha * (target - mean_mom)
            lam_avg = lam_avg * (b - 1) / b + g.lam / b
            if not np.all(np.isfinite(g.lam)):
                raise FloatingPointError(f"non-finite lambda at epoch {epoch}")
        l1 = float(np.abs(target - model_mom).sum())
        row = {"epoch": epoch, "l1_mom": l1}
        if cfg.treg == "rs":
            row["acceptance_rate"] = accepted / max(pool.total_draws - draws_before, 1)
        elif cfg.treg == "snis":
            row["ess"] = float(np.mean(ess))
        row.update({f"lambda_{name}": float(v) for name, v in zip(spec.active_names, g.lam)})
        history.append(row)
        if l1 < best_l1 - cfg.min_delta:
            best_l1, best_lam, wait = l1, lam_avg.copy(), 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    log.info("train_gam[%s]: %d epochs, best l1_mom %.4f, %.1fs", cfg.treg, len(history),
             best_l1, time.perf_counter() - t0)
    return Gam(r, spec, best_lam, history)


# ---------------------------------------------------------------------------
# persistence


def write_training_log(path, history: list[dict]) -> None:
    if not history:
        return
    fields = list(history[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(history)


def save_gam(g: Gam, path, r_checkpoint: str) -> None:
    doc = {
        "r_checkpoint": str(r_checkpoint),
        "lambda": [float(v) for v in g.lam],
        "ft": g.spec.ft,
        "motif": g.spec.motif,
        "distractors": list(g.spec.distractors),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def load_gam(path, r: ArModel | None = None) -> Gam:
    with open(path) as fh:
        doc = json.load(fh)
    if r is None:
        r = ArModel.load(doc["r_checkpoint"])
    spec = FeatureSpec(doc["motif"], doc["ft"], tuple(doc["distractors"]))
    return Gam(r, spec, np.array(doc["lambda"], dtype=np.float64))
