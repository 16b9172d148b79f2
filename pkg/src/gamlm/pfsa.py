"""Deterministic weighted / probabilistic automata over the binary alphabet.

The true data process is a white-noise automaton over length-``n`` strings
intersected with a substring acceptor for a motif, then renormalized by
dynamic programming.  Everything exact about ``p_true`` (partition function,
entropy, mean length, string probabilities) is computed here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

ALPHABET = "01"
FIXPOINT_MAX_ITER = 10**6
FIXPOINT_TOL = 1e-12
PROB_TOL = 1e-12


class AutomatonError(ValueError):
    pass


@dataclass(frozen=True)
class WeightedFsa:
    """Deterministic automaton with nonnegative transition weights.

    ``delta[q, l]`` is the target state of the transition from ``q`` on label
    ``l`` (``-1`` if absent) and ``weight[q, l]`` its weight.
    """

    delta: np.ndarray
    weight: np.ndarray
    initial: int
    finals: frozenset

    def __post_init__(self):
        delta = np.asarray(self.delta, dtype=np.int64)
        weight = np.asarray(self.weight, dtype=np.float64)
        if delta.ndim != 2 or delta.shape[1] != 2 or weight.shape != delta.shape:
            raise AutomatonError("delta and weight must both have shape (states, 2)")
        weight = np.where(delta < 0, 0.0, weight)
        if np.any(weight < 0) or not np.all(np.isfinite(weight)):
            raise AutomatonError("weights must be finite and nonnegative")
        if np.any(delta >= len(delta)):
            raise AutomatonError("transition target out of range")
        if not 0 <= self.initial < len(delta):
            raise AutomatonError("initial state out of range")
        finals = frozenset(int(q) for q in self.finals)
        if any(not 0 <= q < len(delta) for q in finals):
            raise AutomatonError("final state out of range")
        if any(np.any(delta[q] >= 0) for q in finals):
            raise AutomatonError("final states must not have outgoing transitions")
        delta.setflags(write=False)
        weight.setflags(write=False)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "finals", finals)

    @property
    def num_states(self) -> int:
        return len(self.delta)

    @property
    def transitions(self) -> list[tuple[int, int, int, float]]:
        return [
            (q, l, int(self.delta[q, l]), float(self.weight[q, l]))
            for q in range(self.num_states)
            for l in (0, 1)
            if self.delta[q, l] >= 0
        ]

    @classmethod
    def from_transitions(
        cls,
        num_states: int,
        initial: int,
        finals: Iterable[int],
        transitions: Iterable[tuple[int, int, int, float]],
    ):
        delta = np.full((num_states, 2), -1, dtype=np.int64)
        weight = np.zeros((num_states, 2))
        for q, l, q2, w in transitions:
            if delta[q, l] >= 0:
                raise AutomatonError(f"nondeterministic: two transitions from ({q}, {l})")
            delta[q, l] = q2
            weight[q, l] = w
        return cls(delta, weight, initial, frozenset(finals))

    def is_final_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_states, dtype=bool)
        mask[list(self.finals)] = True
        return mask

    def topological_order(self) -> list[int] | None:
        """States in topological order over positive-weight edges, or None if cyclic."""
        indeg = np.zeros(self.num_states, dtype=np.int64)
        for q in range(self.num_states):
            for l in (0, 1):
                if self.delta[q, l] >= 0:
                    indeg[self.delta[q, l]] += 1
        stack = [q for q in range(self.num_states) if indeg[q] == 0]
        order = []
        while stack:
            q = stack.pop()
            order.append(q)
            for l in (0, 1):
                q2 = self.delta[q, l]
                if q2 >= 0:
                    indeg[q2] -= 1
                    if indeg[q2] == 0:
                        stack.append(int(q2))
        return order if len(order) == self.num_states else None

    def is_acyclic(self) -> bool:
        return self.topological_order() is not None

    def path_log_weight(self, x: str) -> float:
        """Log of the product of weights along ``x``; ``-inf`` if rejected."""
        q = self.initial
        total = 0.0
        for ch in x:
            l = ALPHABET.index(ch)
            q2 = self.delta[q, l]
            if q2 < 0 or self.weight[q, l] == 0.0:
                return -math.inf
            total += math.log(self.weight[q, l])
            q = q2
        return total if q in self.finals else -math.inf

    def to_text(self) -> str:
        lines = [f"initial {self.initial}", "final " + " ".join(str(q) for q in sorted(self.finals))]
        lines += [f"{q} {l} {q2} {w!r}" for q, l, q2, w in self.transitions]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str):
        initial = None
        finals: list[int] = []
        transitions = []
        num_states = 0
        for raw in text.splitlines():
            parts = raw.split()
            if not parts:
                continue
            if parts[0] == "initial":
                initial = int(parts[1])
                num_states = max(num_states, initial + 1)
            elif parts[0] == "final":
                finals = [int(p) for p in parts[1:]]
                num_states = max([num_states] + [q + 1 for q in finals])
            else:
                q, l, q2, w = int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3])
                transitions.append((q, l, q2, w))
                num_states = max(num_states, q + 1, q2 + 1)
        if initial is None:
            raise AutomatonError("missing 'initial' header")
        return cls.from_transitions(num_states, initial, finals, transitions)


@dataclass(frozen=True)
class Pfsa(WeightedFsa):
    """Locally normalized deterministic automaton (a probability distribution)."""

    def __post_init__(self):
        super().__post_init__()
        final = self.is_final_mask()
        sums = self.weight.sum(axis=1)
        bad = np.flatnonzero(~final & (np.abs(sums - 1.0) > PROB_TOL))
        if len(bad):
            raise AutomatonError(f"state {bad[0]} is not normalized (sum={sums[bad[0]]!r})")
        if not np.all(np.isfinite(_backward_mass_iter(self))):
            raise AutomatonError("not every state reaches a final state")

    def string_log_prob(self, x: str) -> float:
        return self.path_log_weight(x)

    def string_prob(self, x: str) -> float:
        return math.exp(self.string_log_prob(x))


def _backward_mass_iter(a: WeightedFsa) -> np.ndarray:
    # Coaccessibility check that tolerates cycles: inf marks dead states.
    alive = a.is_final_mask()
    changed = True
    while changed:
        changed = False
        for q in range(a.num_states):
            if alive[q]:
                continue
            for l in (0, 1):
                q2 = a.delta[q, l]
                if q2 >= 0 and a.weight[q, l] > 0 and alive[q2]:
                    alive[q] = True
                    changed = True
                    break
    return np.where(alive, 0.0, np.inf)


@dataclass(frozen=True)
class MixtureProcess:
    components: tuple = field(default_factory=tuple)

    def __post_init__(self):
        comps = tuple((p, float(w)) for p, w in self.components)
        if not comps:
            raise AutomatonError("mixture needs at least one component")
        if any(w < 0 for _, w in comps) or abs(sum(w for _, w in comps) - 1.0) > 1e-12:
            raise AutomatonError("mixture probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "components", comps)

    @property
    def probs(self) -> np.ndarray:
        return np.array([w for _, w in self.components])

    def string_prob(self, x: str) -> float:
        return sum(w * p.string_prob(x) for p, w in self.components)

    def string_log_prob(self, x: str) -> float:
        prob = self.string_prob(x)
        return math.log(prob) if prob > 0 else -math.inf


# ---------------------------------------------------------------------------
# constructions


def white_noise(n: int) -> WeightedFsa:
    """All length-``n`` binary strings, each transition weighted 1/2."""
    trans = [(i, l, i + 1, 0.5) for i in range(n) for l in (0, 1)]
    return WeightedFsa.from_transitions(n + 1, 0, [n], trans)


def single_string(x: str) -> WeightedFsa:
    trans = [(i, ALPHABET.index(ch), i + 1, 1.0) for i, ch in enumerate(x)]
    return WeightedFsa.from_transitions(len(x) + 1, 0, [len(x)], trans)


def failure_function(pattern: str) -> list[int]:
    """Length of the longest proper border of each prefix ``pattern[:i+1]``."""
    fail = [0] * len(pattern)
    k = 0
    for i in range(1, len(pattern)):
        while k and pattern[i] != pattern[k]:
            k = fail[k - 1]
        if pattern[i] == pattern[k]:
            k += 1
        fail[i] = k
    return fail


def matcher_table(pattern: str) -> np.ndarray:
    """String-matching automaton: ``table[j, l]`` is the matched prefix length
    after reading label ``l`` with ``j`` symbols matched (``j < len(pattern)``)."""
    fail = failure_function(pattern)
    m = len(pattern)
    table = np.zeros((m, 2), dtype=np.int64)
    for j in range(m):
        for l, ch in enumerate(ALPHABET):
            if pattern[j] == ch:
                table[j, l] = j + 1
            elif j == 0:
                table[j, l] = 0
            else:
                table[j, l] = table[fail[j - 1], l]
    return table


def build_motif_automaton(motif: str, n: int, mode: str = "contain") -> WeightedFsa:
    """White noise over length-``n`` strings, restricted to strings that contain
    (or exclude) ``motif``.

    Product of a position counter and the motif matcher, expanded over
    reachable pairs only; matched state ``len(motif)`` is absorbing for
    ``contain`` and dead for ``exclude``.  The result is trimmed to states
    that can still reach acceptance.
    """
    if not motif or set(motif) - set(ALPHABET):
        raise AutomatonError("motif must be a nonempty binary string")
    if mode not in ("contain", "exclude"):
        raise AutomatonError(f"unknown mode {mode!r}")
    m = len(motif)
    if mode == "contain" and m > n:
        raise AutomatonError("empty language: motif longer than n")
    table = matcher_table(motif)

    index: dict[tuple[int, int], int] = {(0, 0): 0}
    trans = []
    frontier = [(0, 0)]
    for pos in range(n):
        nxt = []
        for state in frontier:
            _, j = state
            for l in (0, 1):
                j2 = m if j == m else int(table[j, l])
                if mode == "exclude" and j2 == m:
                    continue
                target = (pos + 1, j2)
                if target not in index:
                    index[target] = len(index)
                    nxt.append(target)
                trans.append((index[state], l, index[target], 0.5))
        frontier = nxt
    if mode == "contain":
        finals = [index[s] for s in frontier if s[1] == m]
    else:
        finals = [index[s] for s in frontier]
    if not finals:
        raise AutomatonError("empty language")
    return trim(WeightedFsa.from_transitions(len(index), 0, finals, trans))


def trim(a: WeightedFsa) -> WeightedFsa:
    """Drop states that are unreachable or cannot reach a final state."""
    coacc = np.isfinite(_backward_mass_iter(a))
    reach = np.zeros(a.num_states, dtype=bool)
    reach[a.initial] = True
    stack = [a.initial]
    while stack:
        q = stack.pop()
        for l in (0, 1):
            q2 = a.delta[q, l]
            if q2 >= 0 and a.weight[q, l] > 0 and not reach[q2]:
                reach[q2] = True
                stack.append(int(q2))
    keep = coacc & reach
    if not keep[a.initial]:
        raise AutomatonError("empty language")
    new_id = np.cumsum(keep) - 1
    trans = [
        (int(new_id[q]), l, int(new_id[q2]), w)
        for q, l, q2, w in a.transitions
        if keep[q] and keep[q2] and w > 0
    ]
    finals = [int(new_id[q]) for q in a.finals if keep[q]]
    return WeightedFsa.from_transitions(int(keep.sum()), int(new_id[a.initial]), finals, trans)


def intersect(a: WeightedFsa, b: WeightedFsa) -> WeightedFsa:
    """Product automaton over reachable pairs; weights multiply."""
    index = {(a.initial, b.initial): 0}
    stack = [(a.initial, b.initial)]
    trans = []
    while stack:
        qa, qb = stack.pop()
        for l in (0, 1):
            ta, tb = a.delta[qa, l], b.delta[qb, l]
            if ta < 0 or tb < 0:
                continue
            target = (int(ta), int(tb))
            if target not in index:
                index[target] = len(index)
                stack.append(target)
            trans.append((index[(qa, qb)], l, index[target], a.weight[qa, l] * b.weight[qb, l]))
    finals = [i for (qa, qb), i in index.items() if qa in a.finals and qb in b.finals]
    # Pairs where only one side is final are non-accepting dead ends; they keep
    # the product well formed because a final never has outgoing edges.
    return WeightedFsa.from_transitions(len(index), 0, finals, trans)


# ---------------------------------------------------------------------------
# dynamic programming


def backward_mass(a: WeightedFsa) -> np.ndarray:
    """Accepting mass beta(q) from each state (beta(final) = 1)."""
    order = a.topological_order()
    if order is None:
        raise AutomatonError("acyclic required")
    beta = np.zeros(a.num_states)
    final = a.is_final_mask()
    for q in reversed(order):
        if final[q]:
            beta[q] = 1.0
            continue
        for l in (0, 1):
            q2 = a.delta[q, l]
            if q2 >= 0:
                beta[q] += a.weight[q, l] * beta[q2]
    return beta


def partition_function(a: WeightedFsa) -> float:
    return float(backward_mass(a)[a.initial])


def normalize(a: WeightedFsa) -> Pfsa:
    """Push weights so that each state is locally normalized.

    ``w'(q, l, q') = w(q, l, q') * beta(q') / beta(q)``; the resulting PFSA
    gives each accepted string its weight divided by the partition function.
    """
    beta = backward_mass(a)
    if beta[a.initial] <= 0:
        raise AutomatonError("empty language")
    a = trim(a)
    beta = backward_mass(a)
    trans = [(q, l, q2, w * beta[q2] / beta[q]) for q, l, q2, w in a.transitions]
    delta = np.full((a.num_states, 2), -1, dtype=np.int64)
    weight = np.zeros((a.num_states, 2))
    for q, l, q2, w in trans:
        delta[q, l] = q2
        weight[q, l] = w
    # Renormalize away rounding so the local sums are 1 to machine precision.
    sums = weight.sum(axis=1, keepdims=True)
    weight = np.divide(weight, sums, out=np.zeros_like(weight), where=sums > 0)
    return Pfsa(delta, weight, a.initial, a.finals)


def _local_entropy(p: WeightedFsa) -> np.ndarray:
    w = p.weight
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(w > 0, -w * np.log(np.where(w > 0, w, 1.0)), 0.0)
    return terms.sum(axis=1)


def _expectation_dp(p: WeightedFsa, local: np.ndarray, method: str) -> np.ndarray:
    """Solve V(q) = local(q) + sum_l w(q,l) V(q') with V(final) = 0."""
    final = p.is_final_mask()
    if method == "topological":
        order = p.topological_order()
        if order is None:
            raise AutomatonError("acyclic required")
        value = np.zeros(p.num_states)
        for q in reversed(order):
            if final[q]:
                continue
            acc = local[q]
            for l in (0, 1):
                q2 = p.delta[q, l]
                if q2 >= 0:
                    acc += p.weight[q, l] * value[q2]
            value[q] = acc
        return value
    if method != "fixpoint":
        raise ValueError(f"unknown method {method!r}")
    # Least-fixpoint iteration from zero.
    safe_delta = np.where(p.delta >= 0, p.delta, 0)
    value = np.zeros(p.num_states)
    for _ in range(FIXPOINT_MAX_ITER):
        new = local + (p.weight * value[safe_delta]).sum(axis=1)
        new[final] = 0.0
        if np.max(np.abs(new - value)) < FIXPOINT_TOL:
            return new
        value = new
    raise AutomatonError("fixpoint iteration did not converge")


def entropy(p: Pfsa, method: str | None = None) -> float:
    """Total entropy (nats per sequence) of the distribution defined by ``p``."""
    if method is None:
        method = "topological" if p.is_acyclic() else "fixpoint"
    return float(_expectation_dp(p, _local_entropy(p), method)[p.initial])


def mean_length(p: Pfsa, method: str | None = None) -> float:
    if method is None:
        method = "topological" if p.is_acyclic() else "fixpoint"
    local = p.weight.sum(axis=1)
    return float(_expectation_dp(p, local, method)[p.initial])


def supports_disjoint(a: WeightedFsa, b: WeightedFsa) -> bool:
    return partition_function(intersect(_support(a), _support(b))) == 0.0


def _support(a: WeightedFsa) -> WeightedFsa:
    ones = np.where(a.weight > 0, 1.0, 0.0)
    delta = np.where(a.weight > 0, a.delta, -1)
    return WeightedFsa(delta, ones, a.initial, a.finals)


def mixture_entropy(mix: MixtureProcess) -> float:
    comps = mix.components
    for i in range(len(comps)):
        for j in range(i + 1, len(comps)):
            if not supports_disjoint(comps[i][0], comps[j][0]):
                raise AutomatonError("disjoint supports required")
    h = 0.0
    for p, w in comps:
        if w > 0:
            h += w * entropy(p) - w * math.log(w)
    return h


def motif_mixture(motif: str, n: int, p_contain: float = 0.9) -> MixtureProcess:
    """Motif / anti-motif mixture over white-noise strings."""
    contain = normalize(build_motif_automaton(motif, n, "contain"))
    exclude = normalize(build_motif_automaton(motif, n, "exclude"))
    return MixtureProcess(((contain, p_contain), (exclude, 1.0 - p_contain)))


# ---------------------------------------------------------------------------
# sampling


def _sample_pfsa(p: Pfsa, count: int, rng: np.random.Generator) -> list[str]:
    if count == 0:
        return []
    final = p.is_final_mask()
    state = np.full(count, p.initial, dtype=np.int64)
    labels: list[np.ndarray] = []
    active_hist: list[np.ndarray] = []
    active = ~final[state]
    while active.any():
        u = rng.random(count)
        take_one = u >= p.weight[state, 0]
        lab = take_one.astype(np.int8)
        nxt = p.delta[state, lab]
        state = np.where(active, nxt, state)
        labels.append(lab)
        active_hist.append(active)
        active = ~final[state]
    if not labels:
        return [""] * count
    lab_mat = np.stack(labels, axis=1)
    act_mat = np.stack(active_hist, axis=1)
    chars = np.where(lab_mat == 1, ord("1"), ord("0")).astype(np.uint8)
    if act_mat.all():
        return [row.tobytes().decode() for row in chars]
    return [row[mask].tobytes().decode() for row, mask in zip(chars, act_mat)]


def sample(
    p: Pfsa | MixtureProcess, count: int, rng: np.random.Generator | int | None = None
) -> list[str]:
    """Draw ``count`` i.i.d. strings; a mixture first picks a component."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    rng = np.random.default_rng(rng)
    if isinstance(p, Pfsa):
        return _sample_pfsa(p, count, rng)
    comp = rng.choice(len(p.components), size=count, p=p.probs)
    out: list[str] = [""] * count
    for i, (pfsa, _) in enumerate(p.components):
        idx = np.flatnonzero(comp == i)
        for k, s in zip(idx, _sample_pfsa(pfsa, len(idx), rng)):
            out[k] = s
    return out


def string_prob(p: Pfsa | MixtureProcess, x: str) -> float:
    return p.string_prob(x)


# ---------------------------------------------------------------------------
# datasets


def write_dataset(path, strings: Sequence[str]) -> None:
    with open(path, "w") as fh:
        for s in strings:
            fh.write(s + "\n")


def read_dataset(path) -> list[str]:
    with open(path) as fh:
        return [line.strip() for line in fh if line.strip()]
