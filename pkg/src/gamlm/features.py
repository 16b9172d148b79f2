"""Binary feature family over strings: motif, super-motif, sub-motif and distractors.

Every pattern feature follows the absence-indicator convention: the value is 0
when the pattern occurs in the string and 1 otherwise.  ``d0`` is 0 when the
string begins with ``0``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

FEATURE_NAMES = ("m", "m+0", "m/2", "d0", "d1", "d2", "d3")
NUM_FEATURES = len(FEATURE_NAMES)
_MAX_DRAWS = 10_000


def _check_ft(ft: str) -> str:
    if len(ft) != NUM_FEATURES or set(ft) - {"0", "1"}:
        raise ValueError(f"ft must be a {NUM_FEATURES}-character bit string, got {ft!r}")
    return ft


def _overlaps(candidate: str, motif: str) -> bool:
    return candidate in motif or motif in candidate


def _draw_distractor(length: int, motif: str, rng: np.random.Generator) -> str:
    s = ""
    for _ in range(_MAX_DRAWS):
        s = "".join(rng.choice(["0", "1"], size=length))
        if not _overlaps(s, motif):
            return s
    warnings.warn(f"no length-{length} distractor avoids motif {motif!r}; using {s!r}")
    return s


@dataclass(frozen=True)
class FeatureSpec:
    motif: str
    ft: str
    distractors: tuple[str, str, str]

    def __post_init__(self):
        _check_ft(self.ft)
        if not self.motif or set(self.motif) - {"0", "1"}:
            raise ValueError("motif must be a nonempty binary string")

    @classmethod
    def create(cls, motif: str, ft: str = "1001111", seed: int = 0) -> "FeatureSpec":
        """Draw the three distractor strings (lengths |m|, |m|+2, |m|-2) once."""
        rng = np.random.default_rng(seed)
        m = len(motif)
        lengths = (m, m + 2, max(m - 2, 1))
        return cls(motif, _check_ft(ft), tuple(_draw_distractor(k, motif, rng) for k in lengths))

    @property
    def super_motif(self) -> str:
        return self.motif + "0"

    @property
    def sub_motif(self) -> str:
        return self.motif[: math.ceil(len(self.motif) / 2)]

    @property
    def patterns(self) -> tuple[str, ...]:
        """Pattern for each of the seven features (``d0`` has none)."""
        return (self.motif, self.super_motif, self.sub_motif, "", *self.distractors)

    @property
    def active(self) -> list[int]:
        return [i for i, bit in enumerate(self.ft) if bit == "1"]

    @property
    def dim(self) -> int:
        return self.ft.count("1")

    @property
    def active_names(self) -> list[str]:
        return [FEATURE_NAMES[i] for i in self.active]

    def with_ft(self, ft: str) -> "FeatureSpec":
        return FeatureSpec(self.motif, _check_ft(ft), self.distractors)


def encode(strings: Sequence[str]) -> np.ndarray:
    """Equal-length binary strings to a (count, n) uint8 matrix."""
    if len(strings) == 0:
        return np.zeros((0, 0), dtype=np.uint8)
    buf = "".join(strings).encode()
    n = len(strings[0])
    if len(buf) != n * len(strings):
        raise ValueError("all strings must have the same length")
    return (np.frombuffer(buf, dtype=np.uint8).reshape(len(strings), n) - ord("0")).astype(np.uint8)


def decode(x: np.ndarray) -> list[str]:
    chars = (np.asarray(x, dtype=np.uint8) + ord("0")).astype(np.uint8)
    return [row.tobytes().decode() for row in chars]


def contains_pattern(x: np.ndarray, pattern: str) -> np.ndarray:
    """Boolean per row of ``x``: does ``pattern`` occur as a substring."""
    count, n = x.shape
    k = len(pattern)
    if k > n or count == 0:
        return np.zeros(count, dtype=bool)
    target = np.array([int(c) for c in pattern], dtype=np.uint8)
    if k <= 62:
        powers = (1 << np.arange(k, dtype=np.int64))
        windows = sliding_window_view(x, k, axis=1).astype(np.int64) @ powers
        return (windows == int(target.astype(np.int64) @ powers)).any(axis=1)
    windows = sliding_window_view(x, k, axis=1)
    return (windows == target).all(axis=2).any(axis=1)


def phi_matrix(spec: FeatureSpec, x: np.ndarray) -> np.ndarray:
    """Active features for each row of an encoded batch; shape (count, dim)."""
    x = np.asarray(x, dtype=np.uint8)
    cols = []
    for i in spec.active:
        if FEATURE_NAMES[i] == "d0":
            cols.append(x[:, 0] != 0)
        else:
            cols.append(~contains_pattern(x, spec.patterns[i]))
    if not cols:
        return np.zeros((len(x), 0))
    return np.stack(cols, axis=1).astype(np.float64)


def phi(spec: FeatureSpec, x: str) -> np.ndarray:
    if not x:
        raise ValueError("x must be nonempty")
    return phi_matrix(spec, encode([x]))[0]


def empirical_moments(spec: FeatureSpec, data: Sequence[str]) -> np.ndarray:
    if len(data) == 0:
        raise ValueError("empirical moments of an empty dataset")
    return phi_matrix(spec, encode(list(data))).mean(axis=0)


def motif_frequency(motif: str, data: Sequence[str]) -> float:
    if len(data) == 0:
        raise ValueError("empty dataset")
    return float(contains_pattern(encode(list(data)), motif).mean())
