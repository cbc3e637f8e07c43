"""The eight interpolated training objectives between AR and masked-diffusion.

Each objective is named by its component code, e.g. ``"uc+im+lm+wf"``:

* ``uc`` / ``bc`` -- unidirectional or bidirectional context,
* ``im`` -- input masking (the model reads ``x_t`` instead of ``x_0``),
* ``lm`` -- label masking (loss only on masked positions),
* ``wf`` -- ``1/t`` weighting.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from .core import DEFAULT_CAP, MASK, EnumerationCapError, TabularJoint, check_noise_level, noise
from .models import TabularModel

__all__ = [
    "OBJECTIVE_CODES",
    "ObjectiveSpec",
    "TSampler",
    "loss",
    "mc_batch",
    "exact_batch",
    "expected_loss",
    "exact_expected_loss",
    "objective_optimum",
    "ntp_eval_loss",
]

OBJECTIVE_CODES = (
    "uc",
    "uc+im",
    "uc+lm",
    "uc+lm+wf",
    "uc+im+lm",
    "uc+im+lm+wf",
    "bc+im+lm",
    "bc+im+lm+wf",
)


@dataclass(frozen=True)
class ObjectiveSpec:
    context: str
    input_masking: bool
    label_masking: bool
    weighting: str = "constant"

    def __post_init__(self):
        if self.context not in ("uc", "bc"):
            raise ValueError(f"context must be 'uc' or 'bc', got {self.context!r}")
        if self.weighting not in ("constant", "inverse_t"):
            raise ValueError(f"weighting must be 'constant' or 'inverse_t', got {self.weighting!r}")
        if self.context == "bc" and not (self.input_masking and self.label_masking):
            raise ValueError("bidirectional context requires input and label masking")
        if self.weighting == "inverse_t" and not self.label_masking:
            raise ValueError("1/t weighting is only admissible with label masking")

    @classmethod
    def parse(cls, code) -> "ObjectiveSpec":
        if isinstance(code, cls):
            return code
        parts = code.strip().split("+")
        if parts[0] not in ("uc", "bc") or len(set(parts)) != len(parts):
            raise ValueError(f"malformed objective code {code!r}")
        flags = set(parts[1:])
        unknown = flags - {"im", "lm", "wf"}
        if unknown:
            raise ValueError(f"unknown objective components {sorted(unknown)} in {code!r}")
        spec = cls(parts[0], "im" in flags, "lm" in flags, "inverse_t" if "wf" in flags else "constant")
        if spec.code != code.strip():
            raise ValueError(f"objective code {code!r} is not in canonical order; use {spec.code!r}")
        return spec

    @property
    def code(self) -> str:
        parts = [self.context]
        if self.input_masking:
            parts.append("im")
        if self.label_masking:
            parts.append("lm")
        if self.weighting == "inverse_t":
            parts.append("wf")
        return "+".join(parts)

    @property
    def uses_noise(self) -> bool:
        return self.input_masking or self.label_masking

    def omega(self, t: float) -> float:
        return 1.0 / t if self.weighting == "inverse_t" else 1.0


@dataclass(frozen=True)
class TSampler:
    """``t ~ Uniform(t_min, 1)``; the truncation keeps ``1/t`` bounded."""

    t_min: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.t_min < 1.0:
            raise ValueError(f"t_min must lie in (0, 1), got {self.t_min}")

    def sample(self, rng, size=None):
        return rng.uniform(self.t_min, 1.0, size=size)

    def pattern_weight(self, m: int, L: int, weighting: str) -> float:
        """``E_t[omega_t * t^m (1-t)^(L-m)]`` for one mask pattern with ``m`` masks."""
        a = m + 1 if weighting == "constant" else m
        b = L - m + 1
        if a > 0:
            val = special.beta(a, b) * special.betaincc(a, b, self.t_min)
        else:
            val, _ = integrate.quad(lambda t: t ** (a - 1) * (1 - t) ** (b - 1), self.t_min, 1.0,
                                    epsabs=1e-12, epsrel=1e-12)
        return float(val) / (1.0 - self.t_min)


def _contexts(spec: ObjectiveSpec, x0, x_t, L):
    """Yield ``(i, context sequence)`` for every labelled position."""
    for i in range(L):
        if spec.label_masking and x_t[i] != MASK:
            continue
        if spec.context == "bc":
            yield i, tuple(x_t)
        else:
            src = x_t if spec.input_masking else x0
            yield i, tuple(src[:i]) + (MASK,) * (L - i)


def loss(model, x0, t: float, x_t, spec) -> float:
    """Negative log-likelihood of one ``(x0, t, x_t)`` draw under ``spec``."""
    spec = ObjectiveSpec.parse(spec)
    t = check_noise_level(t)
    if spec.context == "bc" and model.context_scope == "unidirectional":
        raise ValueError("a bidirectional-context objective needs a bidirectional model")
    L = len(x0)
    total = 0.0
    for i, ctx in _contexts(spec, x0, x_t, L):
        p = model.predict_proba(ctx, [i])[0][x0[i]]
        total -= math.log(p) if p > 0 else -math.inf
    return spec.omega(t) * total


def mc_batch(x0s, spec, sampler: TSampler, rng) -> list:
    """Draw ``t`` and ``x_t`` for each clean sequence; weights average over the batch."""
    spec = ObjectiveSpec.parse(spec)
    n = len(x0s)
    out = []
    for x0 in x0s:
        t = float(sampler.sample(rng))
        x_t = noise(x0, t, rng)
        out.append((tuple(x0), x_t, spec.omega(t) / n))
    return out


def _patterns(L):
    return itertools.product((False, True), repeat=L)


def exact_batch(joint: TabularJoint, spec, sampler: TSampler, cap: int = DEFAULT_CAP) -> list:
    """Every ``(x0, mask pattern)`` pair weighted by its exact probability.

    The noise level is integrated out analytically, so a batch loss over
    this list equals the expected objective (with ``omega_t`` included).
    """
    spec = ObjectiveSpec.parse(spec)
    L = joint.L
    n_items = joint.V**L * (2**L if spec.uses_noise else 1)
    if n_items > cap:
        raise EnumerationCapError(f"exact batch of {n_items} items exceeds cap {cap}")
    if not spec.uses_noise:
        return [(x, x, p) for x, p in joint.items()]
    pw = {m: sampler.pattern_weight(m, L, spec.weighting) for m in range(L + 1)}
    out = []
    for x, p in joint.items():
        for pat in _patterns(L):
            m = sum(pat)
            if spec.label_masking and m == 0:
                continue
            x_t = tuple(MASK if h else v for v, h in zip(x, pat))
            out.append((x, x_t, p * pw[m]))
    return out


def exact_expected_loss(model, joint: TabularJoint, spec, sampler: TSampler = TSampler()) -> float:
    spec = ObjectiveSpec.parse(spec)
    total = 0.0
    for x0, x_t, w in exact_batch(joint, spec, sampler):
        # the item weight already carries omega_t
        for i, ctx in _contexts(spec, x0, x_t, joint.L):
            total -= w * math.log(model.predict_proba(ctx, [i])[0][x0[i]])
    return total


def expected_loss(model, joint: TabularJoint, spec, t_sampler: TSampler = TSampler(), n_mc: int = 1000,
                  seed=0):
    """Monte-Carlo estimate of the objective; returns ``(mean, stderr)``."""
    spec = ObjectiveSpec.parse(spec)
    if n_mc <= 0:
        raise ValueError("empty sample")
    rng = np.random.default_rng(seed)
    xs = joint.sample(n_mc, rng)
    vals = np.empty(n_mc)
    for k, x0 in enumerate(xs):
        t = float(t_sampler.sample(rng))
        x_t = noise(x0, t, rng)
        vals[k] = loss(model, x0, t, x_t, spec)
    stderr = float(vals.std(ddof=1) / math.sqrt(n_mc)) if n_mc > 1 else math.inf
    return float(vals.mean()), stderr


def objective_optimum(joint: TabularJoint, spec, t_sampler: TSampler = TSampler(),
                      cap: int = DEFAULT_CAP) -> TabularModel:
    """Closed-form minimiser of ``spec`` over all tabular conditional models.

    Each ``(position, visible context)`` cell gets the exact conditional law
    of its label under ``x0 ~ joint``, ``t ~ t_sampler`` and masking. The
    aggregate cell weights are kept on ``cell_weights_``.
    """
    spec = ObjectiveSpec.parse(spec)
    scope = "bidirectional" if spec.context == "bc" else "unidirectional"
    shell = TabularModel(joint.V, joint.L, scope)
    acc: dict = {}
    for x0, x_t, w in exact_batch(joint, spec, t_sampler, cap=cap):
        for i, ctx in _contexts(spec, x0, x_t, joint.L):
            key = shell.cell_key(ctx, i)
            if key not in acc:
                acc[key] = np.zeros(joint.V)
            acc[key][x0[i]] += w
    weights = {k: float(v.sum()) for k, v in acc.items()}
    table = {k: v / v.sum() for k, v in acc.items()}
    return TabularModel.from_probs(joint.V, joint.L, scope, table, weights)


def ntp_eval_loss(model, data) -> float:
    """Next-token loss with the whole suffix masked, averaged over positions 2..L.

    ``data`` is a :class:`TabularJoint` (exact) or an iterable of sequences.
    """
    if isinstance(data, TabularJoint):
        items = list(data.items())
        L = data.L
    else:
        seqs = [tuple(x) for x in data]
        if not seqs:
            raise ValueError("empty corpus")
        items = [(x, 1.0 / len(seqs)) for x in seqs]
        L = len(seqs[0])
    if L < 2:
        raise ValueError("next-token loss needs sequences of length >= 2")
    total = 0.0
    for x, p in items:
        s = 0.0
        for i in range(1, L):
            ctx = tuple(x[:i]) + (MASK,) * (L - i)
            q = model.predict_proba(ctx, [i])[0][x[i]]
            s -= math.log(q) if q > 0 else -math.inf
        total += p * s / (L - 1)
    return total
