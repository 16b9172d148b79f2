"""Autoregressive LSTM over fixed-length binary strings, in plain numpy.

Token ids are 0 and 1 for the symbols and 2 for the start-of-sequence marker.
A string of length n is scored by exactly n next-symbol softmaxes; there is no
end token because the length is known.  Per-character quantities divide by
``n + 1`` (see :func:`chars_per_string`).
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .features import decode, encode

log = logging.getLogger(__name__)

BOS = 2
VOCAB_IN = 3
PARAM_NAMES = ("emb", "Wx", "Wh", "b", "Wo", "bo")
CHECKPOINT_VERSION = 1


def chars_per_string(n: int) -> int:
    """Characters charged per length-``n`` string: n symbols plus an implicit,
    certain end-of-string symbol (it adds 0 nats but counts as a position)."""
    return n + 1


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss!r} at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    lr: float = 1e-3
    patience: int = 20
    max_epochs: int = 500
    batch_size: int = 64
    seed: int = 0
    embed_dim: int = 16
    hidden_dim: int = 64
    init_scale: float = 0.08
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr < 0 or self.patience <= 0 or self.max_epochs <= 0 or self.batch_size <= 0:
            raise ValueError("training hyperparameters must be positive")


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _log_softmax2(logits):
    logits = logits.astype(np.float64)
    mx = logits.max(axis=-1, keepdims=True)
    z = logits - mx
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class ArModel:
    """One-layer LSTM next-symbol model with a two-way softmax per position."""

    def __init__(self, n: int, params: dict[str, np.ndarray], meta: dict | None = None):
        self.n = int(n)
        self.params = params
        self.meta = dict(meta or {})
        self._adam: dict | None = None

    @classmethod
    def init(cls, n: int, embed_dim: int = 16, hidden_dim: int = 64, seed=0,
             scale: float = 0.08, dtype="float32"):
        rng = np.random.default_rng(seed)
        E, H = embed_dim, hidden_dim
        shapes = {
            "emb": (VOCAB_IN, E),
            "Wx": (E, 4 * H),
            "Wh": (H, 4 * H),
            "b": (4 * H,),
            "Wo": (H, 2),
            "bo": (2,),
        }
        params = {k: rng.uniform(-scale, scale, size=s).astype(dtype) for k, s in shapes.items()}
        return cls(n, params)

    @property
    def hidden_dim(self) -> int:
        return self.params["Wh"].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.params["emb"].shape[1]

    @property
    def dtype(self):
        return self.params["Wh"].dtype

    def astype(self, dtype) -> "ArModel":
        new = ArModel(self.n, {k: v.astype(dtype) for k, v in self.params.items()}, copy.deepcopy(self.meta))
        return new

    def copy(self) -> "ArModel":
        new = ArModel(self.n, {k: v.copy() for k, v in self.params.items()}, copy.deepcopy(self.meta))
        new._adam = copy.deepcopy(self._adam)
        return new

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- scoring ----------------------------------------------------------

    def _as_matrix(self, data) -> np.ndarray:
        if isinstance(data, np.ndarray):
            x = data
        else:
            x = encode(list(data))
        if x.ndim != 2 or (len(x) and x.shape[1] != self.n):
            raise ValueError(f"expected strings of length {self.n}")
        return x

    def _gate_scale(self) -> np.ndarray:
        # sigmoid(a) = (1 + tanh(a / 2)) / 2: one tanh call covers all four gates.
        H = self.hidden_dim
        scale = np.ones(4 * H, dtype=self.dtype)
        scale[: 3 * H] = 0.5
        return scale

    def _forward(self, x: np.ndarray, keep: bool):
        """Run the LSTM over a batch; arrays in the cache are time-major."""
        p = self.params
        B, n = x.shape
        H = self.hidden_dim
        dt = self.dtype
        tok = np.empty((n, B), dtype=np.int64)
        tok[0] = BOS
        tok[1:] = x[:, :-1].T
        scale = self._gate_scale()
        table = (p["emb"] @ p["Wx"] + p["b"]) * scale
        gx = table[tok]
        Whs = p["Wh"] * scale
        h = np.zeros((B, H), dtype=dt)
        c = np.zeros((B, H), dtype=dt)
        hs = np.empty((n, B, H), dtype=dt)
        acts = np.empty((n, B, 4 * H), dtype=dt)
        cs = np.empty((n, B, H), dtype=dt) if keep else None
        tcs = np.empty((n, B, H), dtype=dt) if keep else None
        for t in range(n):
            z = acts[t]
            np.tanh(gx[t] + h @ Whs, out=z)
            ifo = z[:, : 3 * H]
            ifo *= 0.5
            ifo += 0.5
            c = z[:, H : 2 * H] * c + z[:, :H] * z[:, 3 * H :]
            tc = np.tanh(c)
            h = hs[t]
            np.multiply(z[:, 2 * H : 3 * H], tc, out=h)
            if keep:
                cs[t] = c
                tcs[t] = tc
        logp = _log_softmax2(hs @ p["Wo"] + p["bo"])
        cache = (tok, hs, cs, tcs, acts) if keep else None
        return logp, cache

    def log_probs(self, data, chunk: int = 4096) -> np.ndarray:
        """Total log-probability (nats) of each string."""
        x = self._as_matrix(data)
        out = np.empty(len(x))
        for s in range(0, len(x), chunk):
            xb = x[s : s + chunk]
            logp, _ = self._forward(xb, keep=False)
            picked = np.where(xb.T == 1, logp[..., 1], logp[..., 0])
            out[s : s + chunk] = picked.sum(axis=0)
        return out

    def log_prob(self, x: str) -> float:
        if len(x) != self.n:
            raise ValueError(f"expected a string of length {self.n}, got {len(x)}")
        return float(self.log_probs([x])[0])

    # -- gradients --------------------------------------------------------

    def loss_and_grad(self, data) -> tuple[float, dict[str, np.ndarray]]:
        """Mean negative log-likelihood per string and its parameter gradients."""
        x = self._as_matrix(data)
        p = self.params
        B, n = x.shape
        H = self.hidden_dim
        dt = self.dtype
        logp, (tok, hs, cs, tcs, acts) = self._forward(x, keep=True)
        is_one = x.T == 1
        loss = -np.where(is_one, logp[..., 1], logp[..., 0]).sum() / B

        dlogits = np.exp(logp)
        dlogits[..., 0] -= ~is_one
        dlogits[..., 1] -= is_one
        dlogits = (dlogits / B).astype(dt)
        grads = {
            "Wo": hs.reshape(-1, H).T @ dlogits.reshape(-1, 2),
            "bo": dlogits.sum(axis=(0, 1)),
        }
        dhs = dlogits @ p["Wo"].T

        i = acts[..., :H]
        f = acts[..., H : 2 * H]
        o = acts[..., 2 * H : 3 * H]
        g = acts[..., 3 * H :]
        c_prev = np.concatenate([np.zeros((1, B, H), dtype=dt), cs[:-1]])
        # d(pre-activation) = coef * dc for i, f, g and coef * dh for o.
        coef = np.empty((n, B, 4, H), dtype=dt)
        coef[:, :, 0] = g * i * (1 - i)
        coef[:, :, 1] = c_prev * f * (1 - f)
        coef[:, :, 2] = tcs * o * (1 - o)
        coef[:, :, 3] = i * (1 - g * g)
        dc_coef = o * (1 - tcs * tcs)

        WhT = p["Wh"].T
        dgx = np.empty((n, B, 4, H), dtype=dt)
        dh_next = np.zeros((B, H), dtype=dt)
        dc_next = np.zeros((B, H), dtype=dt)
        for t in range(n - 1, -1, -1):
            dh = dhs[t] + dh_next
            dc = dh * dc_coef[t] + dc_next
            da = dgx[t]
            np.multiply(dc[:, None, :], coef[t], out=da)
            np.multiply(dh, coef[t, :, 2], out=da[:, 2])
            dh_next = da.reshape(B, 4 * H) @ WhT
            dc_next = dc * f[t]
        flat_dgx = dgx.reshape(-1, 4 * H)
        h_prev = np.concatenate([np.zeros((1, B, H), dtype=dt), hs[:-1]]).reshape(-1, H)
        grads["Wh"] = h_prev.T @ flat_dgx
        onehot = (tok.reshape(-1, 1) == np.arange(VOCAB_IN)).astype(dt)
        per_token = onehot.T @ flat_dgx
        grads["Wx"] = p["emb"].T @ per_token
        grads["b"] = per_token.sum(axis=0)
        grads["emb"] = per_token @ p["Wx"].T
        return float(loss), grads

    def adam_step(self, grads: dict[str, np.ndarray], lr: float,
                  beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        if self._adam is None:
            self._adam = {
                "t": 0,
                "m": {k: np.zeros_like(v) for k, v in self.params.items()},
                "v": {k: np.zeros_like(v) for k, v in self.params.items()},
            }
        st = self._adam
        st["t"] += 1
        t = st["t"]
        corr = math.sqrt(1 - beta2**t) / (1 - beta1**t)
        for k, g in grads.items():
            m, v = st["m"][k], st["v"][k]
            m *= beta1
            m += (1 - beta1) * g
            v *= beta2
            v += (1 - beta2) * g * g
            self.params[k] -= lr * corr * m / (np.sqrt(v) + eps)

    # -- sampling ---------------------------------------------------------

    def sample_matrix(self, count: int, rng, chunk: int = 8192) -> np.ndarray:
        """Ancestral samples as a (count, n) uint8 matrix."""
        rng = np.random.default_rng(rng)
        p = self.params
        H = self.hidden_dim
        scale = self._gate_scale()
        table = (p["emb"] @ p["Wx"] + p["b"]) * scale
        Whs = p["Wh"] * scale
        out = np.empty((count, self.n), dtype=np.uint8)
        for s in range(0, count, chunk):
            B = min(chunk, count - s)
            h = np.zeros((B, H), dtype=self.dtype)
            c = np.zeros((B, H), dtype=self.dtype)
            tok = np.full(B, BOS)
            u = rng.random((B, self.n))
            for t in range(self.n):
                z = np.tanh(table[tok] + h @ Whs)
                ifo = z[:, : 3 * H]
                ifo *= 0.5
                ifo += 0.5
                c = z[:, H : 2 * H] * c + z[:, :H] * z[:, 3 * H :]
                h = z[:, 2 * H : 3 * H] * np.tanh(c)
                logits = (h @ p["Wo"] + p["bo"]).astype(np.float64)
                p1 = _sigmoid(logits[:, 1] - logits[:, 0])
                tok = (u[:, t] < p1).astype(np.int64)
                out[s : s + B, t] = tok
        return out

    def sample(self, count: int, rng) -> list[str]:
        return decode(self.sample_matrix(count, rng))

    # -- persistence ------------------------------------------------------

    def save(self, path) -> None:
        header = {"version": CHECKPOINT_VERSION, "n": self.n, "meta": self.meta}
        np.savez(path, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
                 **self.params)

    @classmethod
    def load(cls, path) -> "ArModel":
        with np.load(path) as z:
            header = json.loads(z["__header__"].tobytes().decode())
            if header.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
            params = {k: z[k].copy() for k in PARAM_NAMES}
        return cls(header["n"], params, header["meta"])


def ar_log_prob(model: ArModel, x: str) -> float:
    return model.log_prob(x)


def ar_sample(model: ArModel, count: int, seed) -> list[str]:
    return model.sample(count, seed)


def cross_entropy(model: ArModel, data) -> float:
    """Mean negative log-likelihood in nats per character."""
    if len(data) == 0:
        raise ValueError("cross-entropy of an empty dataset")
    return float(-model.log_probs(data).mean() / chars_per_string(model.n))


def _epoch_batches(num: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(num)
    for s in range(0, num, batch_size):
        yield perm[s : s + batch_size]


def single_update(model: ArModel, batch, cfg: TrainConfig, rng=None) -> ArModel:
    """One Adam pass (in minibatches) over ``batch``; returns an updated copy."""
    x = model._as_matrix(batch)
    if len(x) == 0:
        raise ValueError("empty batch")
    new = model.copy()
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    for idx in _epoch_batches(len(x), cfg.batch_size, rng):
        loss, grads = new.loss_and_grad(x[idx])
        if not math.isfinite(loss):
            raise TrainingDivergedError(0, loss)
        new.adam_step(grads, cfg.lr)
    return new


def train_ar(D, V, cfg: TrainConfig, model: ArModel | None = None) -> ArModel:
    """Maximum-likelihood training with early stopping on validation CE.

    Returns the parameters of the best validation epoch.
    """
    if len(D) == 0 or len(V) == 0:
        raise ValueError("training and validation data must be nonempty")
    xd = encode(list(D)) if not isinstance(D, np.ndarray) else D
    xv = encode(list(V)) if not isinstance(V, np.ndarray) else V
    n = xd.shape[1]
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = ArModel.init(n, cfg.embed_dim, cfg.hidden_dim, rng, cfg.init_scale, cfg.dtype)
    else:
        model = model.copy()
    best_ce = math.inf
    best_params = {k: v.copy() for k, v in model.params.items()}
    best_epoch = -1
    wait = 0
    history = []
    epoch = 0
    for epoch in range(cfg.max_epochs):
        total = 0.0
        for idx in _epoch_batches(len(xd), cfg.batch_size, rng):
            loss, grads = model.loss_and_grad(xd[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            total += loss * len(idx)
            model.adam_step(grads, cfg.lr)
        val_ce = cross_entropy(model, xv)
        history.append((epoch, total / len(xd) / chars_per_string(n), val_ce))
        if val_ce < best_ce:
            best_ce, best_epoch, wait = val_ce, epoch, 0
            best_params = {k: v.copy() for k, v in model.params.items()}
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    log.info("train_ar: %d epochs, best val CE %.4f at epoch %d", epoch + 1, best_ce, best_epoch)
    model.params = best_params
    model._adam = None
    model.meta.update(
        epochs_run=epoch + 1,
        best_epoch=best_epoch,
        best_val_ce=best_ce,
        train_config=asdict(cfg),
        history=history,
    )
    return model
