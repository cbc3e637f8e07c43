"""Token alphabets, the masking process and exact tabular distributions.

Sequences are plain tuples of ints. Masked positions hold the sentinel
:data:`MASK`, which lies outside every vocabulary range so no model can
ever emit it. All entropies are in nats.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence as Seq

import numpy as np

MASK = -1
DEFAULT_CAP = 10**7

__all__ = [
    "MASK",
    "DEFAULT_CAP",
    "EnumerationCapError",
    "Vocabulary",
    "FactorizedDist",
    "TabularJoint",
    "check_sequence",
    "check_masked",
    "check_noise_level",
    "noise",
    "factorized_to_joint",
    "joint_entropy",
    "entropy",
    "enumerate_sequences",
]


class EnumerationCapError(ValueError):
    """Raised when a state space is larger than the configured cap."""


@dataclass(frozen=True)
class Vocabulary:
    size: int
    separator_id: Optional[int] = None

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"vocabulary size must be >= 1, got {self.size}")
        if self.separator_id is not None and not 0 <= self.separator_id < self.size:
            raise ValueError(f"separator_id {self.separator_id} outside [0, {self.size})")

    @property
    def mask_id(self) -> int:
        return MASK


def check_sequence(x, V: int, L: Optional[int] = None) -> tuple:
    """Validate a clean token sequence and return it as a tuple."""
    x = tuple(int(t) for t in x)
    if len(x) < 1:
        raise ValueError("sequence must have length >= 1")
    if L is not None and len(x) != L:
        raise ValueError(f"expected length {L}, got {len(x)}")
    for pos, t in enumerate(x):
        if not 0 <= t < V:
            raise ValueError(f"token {t} at position {pos} outside [0, {V})")
    return x


def check_masked(x, V: int, L: Optional[int] = None) -> tuple:
    """Validate a partially masked sequence and return it as a tuple."""
    x = tuple(int(t) for t in x)
    if L is not None and len(x) != L:
        raise ValueError(f"expected length {L}, got {len(x)}")
    for pos, t in enumerate(x):
        if t != MASK and not 0 <= t < V:
            raise ValueError(f"token {t} at position {pos} is neither MASK nor in [0, {V})")
    return x


def check_noise_level(t: float) -> float:
    t = float(t)
    if not 0.0 < t <= 1.0:
        raise ValueError(f"noise level must lie in (0, 1], got {t}")
    return t


def noise(x0, t: float, rng_seed) -> tuple:
    """Mask each position of ``x0`` independently with probability ``t``.

    ``rng_seed`` may be an int, a ``SeedSequence`` or a ``Generator``.
    """
    t = check_noise_level(t)
    rng = np.random.default_rng(rng_seed)
    x0 = tuple(int(v) for v in x0)
    hits = rng.random(len(x0)) < t
    return tuple(MASK if h else v for v, h in zip(x0, hits))


def _check_prob_vector(p: np.ndarray, atol: float, what: str) -> None:
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"{what} must be a non-empty 1-d vector")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValueError(f"{what} has negative or non-finite entries")
    if abs(p.sum() - 1.0) > atol:
        raise ValueError(f"{what} sums to {p.sum()!r}, not 1")


class FactorizedDist:
    """Product of independent per-position marginals ``q^1..q^L``."""

    def __init__(self, marginals, atol: float = 1e-12):
        q = np.array(marginals, dtype=float)
        if q.ndim != 2:
            raise ValueError("marginals must be an L x V array")
        for i, row in enumerate(q):
            _check_prob_vector(row, atol, f"marginal {i}")
        q.setflags(write=False)
        self.marginals = q

    @property
    def L(self) -> int:
        return self.marginals.shape[0]

    @property
    def V(self) -> int:
        return self.marginals.shape[1]

    def prob(self, x) -> float:
        return float(np.prod(self.marginals[np.arange(self.L), list(x)]))

    def to_dict(self) -> dict:
        return {"marginals": self.marginals.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FactorizedDist":
        return cls(d["marginals"])

    def __eq__(self, other):
        return isinstance(other, FactorizedDist) and np.array_equal(self.marginals, other.marginals)

    def __repr__(self):
        return f"FactorizedDist(L={self.L}, V={self.V})"


class TabularJoint:
    """An explicit probability table over ``V**L`` sequences.

    Entries are stored flat in lexicographic order, position 0 being the
    most significant digit, which matches :func:`enumerate_sequences`.
    """

    def __init__(self, V: int, L: int, probs, atol: float = 1e-12):
        probs = np.array(probs, dtype=float).ravel()
        if probs.size != V**L:
            raise ValueError(f"expected {V**L} entries for V={V}, L={L}, got {probs.size}")
        _check_prob_vector(probs, atol, "joint table")
        probs.setflags(write=False)
        self.V = int(V)
        self.L = int(L)
        self.probs = probs

    @property
    def table(self) -> np.ndarray:
        return self.probs.reshape((self.V,) * self.L)

    def index(self, x) -> int:
        idx = 0
        for t in x:
            idx = idx * self.V + int(t)
        return idx

    def prob(self, x) -> float:
        return float(self.probs[self.index(x)])

    def marginal(self, i: int) -> np.ndarray:
        axes = tuple(a for a in range(self.L) if a != i)
        return self.table.sum(axis=axes)

    def items(self) -> Iterator[tuple]:
        """Yield ``(sequence, prob)`` for every positive-probability entry."""
        for x, p in zip(enumerate_sequences(self.V, self.L, cap=self.probs.size), self.probs):
            if p > 0:
                yield x, float(p)

    def sample(self, n: int, rng) -> list:
        rng = np.random.default_rng(rng)
        idx = rng.choice(self.probs.size, size=n, p=self.probs)
        return [tuple(int(v) for v in np.unravel_index(k, (self.V,) * self.L)) for k in idx]

    @classmethod
    def from_mapping(cls, V: int, L: int, mapping: dict, atol: float = 1e-12) -> "TabularJoint":
        probs = np.zeros(V**L)
        for x, p in mapping.items():
            idx = 0
            for t in x:
                idx = idx * V + int(t)
            probs[idx] += p
        return cls(V, L, probs, atol=atol)

    def total_variation(self, other: "TabularJoint") -> float:
        if (self.V, self.L) != (other.V, other.L):
            raise ValueError("joints over different spaces")
        return 0.5 * float(np.abs(self.probs - other.probs).sum())

    def to_dict(self) -> dict:
        return {"V": self.V, "L": self.L, "probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TabularJoint":
        return cls(d["V"], d["L"], d["probs"])

    def __eq__(self, other):
        return (
            isinstance(other, TabularJoint)
            and (self.V, self.L) == (other.V, other.L)
            and np.array_equal(self.probs, other.probs)
        )

    def __repr__(self):
        return f"TabularJoint(V={self.V}, L={self.L})"


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj.to_dict(), fh)


def load_distribution(path):
    """Load a ``TabularJoint`` or ``FactorizedDist`` from its JSON document."""
    with open(path) as fh:
        d = json.load(fh)
    if "marginals" in d:
        return FactorizedDist.from_dict(d)
    return TabularJoint.from_dict(d)


def enumerate_sequences(V: int, L: int, cap: int = DEFAULT_CAP) -> Iterator[tuple]:
    if V**L > cap:
        raise EnumerationCapError(f"V**L = {V}**{L} exceeds enumeration cap {cap}")
    return itertools.product(range(V), repeat=L)


def factorized_to_joint(f: FactorizedDist, cap: int = DEFAULT_CAP) -> TabularJoint:
    if f.V**f.L > cap:
        raise EnumerationCapError(f"V**L = {f.V}**{f.L} exceeds enumeration cap {cap}")
    table = np.ones(())
    for q in f.marginals:
        table = np.multiply.outer(table, q)
    return TabularJoint(f.V, f.L, table.ravel())


def entropy(p) -> float:
    """Shannon entropy in nats with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=float).ravel()
    nz = p[p > 0]
    # adding 0.0 turns a -0.0 from point masses into 0.0
    return float(-(nz * np.log(nz)).sum()) + 0.0


def joint_entropy(j: TabularJoint, per_token: bool = False) -> float:
    h = entropy(j.probs)
    return h / j.L if per_token else h


def random_factorized(V: int, L: int, rng, alpha: float = 1.0) -> FactorizedDist:
    rng = np.random.default_rng(rng)
    return FactorizedDist(rng.dirichlet(np.full(V, alpha), size=L))


def random_joint(V: int, L: int, rng, alpha: float = 1.0) -> TabularJoint:
    rng = np.random.default_rng(rng)
    return TabularJoint(V, L, rng.dirichlet(np.full(V**L, alpha)))


def as_int_tuple(x: Seq[int]) -> tuple:
    return tuple(int(v) for v in x)
