"""Predictive models ``p(x_0^i | context)``.

Every model maps a masked sequence plus a list of query positions to one
probability vector over the vocabulary per position. Exact oracles are
derived from tabular data distributions; :class:`TabularModel` and
:class:`TrainableModel` carry parameters and analytic gradients.

Models are immutable after construction or fitting. :func:`sgd_step`
returns a new model rather than updating in place.
"""
from __future__ import annotations

import copy
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import MASK, FactorizedDist, TabularJoint, check_masked

__all__ = [
    "ZeroProbabilityContextError",
    "PredictiveModel",
    "OracleFactorized",
    "OraclePosterior",
    "OracleCausal",
    "TabularModel",
    "TrainableModel",
    "posterior_predict",
    "causal_predict",
    "design_matrices",
    "grad",
    "sgd_step",
    "model_to_dict",
    "model_from_dict",
]

SCOPES = ("unidirectional", "bidirectional")


class ZeroProbabilityContextError(ValueError):
    """The conditioning event has zero probability under the data table."""


def _check_scope(scope):
    if scope not in SCOPES:
        raise ValueError(f"context_scope must be one of {SCOPES}, got {scope!r}")


def check_distribution_rows(P: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if not np.all(np.isfinite(P)) or np.any(P < 0):
        raise ValueError("model returned negative or non-finite probabilities")
    bad = np.abs(P.sum(axis=-1) - 1.0) > atol
    if np.any(bad):
        raise ValueError(f"model returned rows not summing to 1: {P.sum(axis=-1)[bad]}")
    return P


class PredictiveModel(BaseEstimator):
    """Base class. Subclasses implement ``_predict(x_t, positions)``."""

    context_scope = "bidirectional"

    @property
    def vocab_size(self) -> int:
        raise NotImplementedError

    @property
    def seq_len(self) -> int:
        raise NotImplementedError

    def predict_proba(self, x_t, positions=None) -> np.ndarray:
        """Return an array of shape ``(len(positions), V)``.

        ``positions`` defaults to every masked position of ``x_t``.
        """
        x_t = check_masked(x_t, self.vocab_size, self.seq_len)
        if positions is None:
            positions = [i for i, v in enumerate(x_t) if v == MASK]
        positions = [int(i) for i in positions]
        if not positions:
            return np.zeros((0, self.vocab_size))
        return self._predict(x_t, positions)

    def _predict(self, x_t, positions):
        raise NotImplementedError


def _condition(joint: TabularJoint, x_t) -> np.ndarray:
    """Slice the joint table at the unmasked coordinates of ``x_t``."""
    index = tuple(slice(None) if v == MASK else int(v) for v in x_t)
    sub = joint.table[index]
    total = sub.sum()
    if total <= 0:
        raise ZeroProbabilityContextError(f"context {x_t} has zero probability")
    return sub / total


def posterior_predict(joint: TabularJoint, x_t, i: int) -> np.ndarray:
    """Exact ``P(X^i | unmasked coordinates of x_t)``."""
    x_t = check_masked(x_t, joint.V, joint.L)
    if x_t[i] != MASK:
        raise ValueError(f"position {i} is not masked in {x_t}")
    sub = _condition(joint, x_t)
    masked = [j for j, v in enumerate(x_t) if v == MASK]
    axis = masked.index(i)
    others = tuple(a for a in range(sub.ndim) if a != axis)
    return sub.sum(axis=others)


def causal_predict(joint: TabularJoint, x, i: int) -> np.ndarray:
    """Exact next-token conditional ``P(X^i | X^{<i} = x^{<i})``."""
    prefix = tuple(int(v) for v in x[:i])
    if any(v == MASK for v in prefix):
        raise ValueError(f"causal prediction at {i} needs an unmasked prefix, got {prefix}")
    sub = joint.table[prefix] if prefix else joint.table
    total = sub.sum()
    if total <= 0:
        raise ZeroProbabilityContextError(f"prefix {prefix} has zero probability")
    axes = tuple(range(1, sub.ndim))
    return sub.sum(axis=axes) / total


class OracleFactorized(PredictiveModel):
    """Returns ``q^i`` at every queried position, ignoring the context."""

    def __init__(self, dist: FactorizedDist, context_scope: str = "bidirectional"):
        self.dist = dist
        self.context_scope = context_scope

    @property
    def vocab_size(self):
        return self.dist.V

    @property
    def seq_len(self):
        return self.dist.L

    def _predict(self, x_t, positions):
        return np.array(self.dist.marginals[positions])


class _CachedOracle(PredictiveModel):
    def _cache(self):
        # memo keyed by full context; safe because the table is immutable
        if "_memo" not in self.__dict__:
            self.__dict__["_memo"] = {}
        return self.__dict__["_memo"]

    def _predict(self, x_t, positions):
        memo = self._cache()
        rows = []
        for i in positions:
            key = (x_t, i)
            if key not in memo:
                memo[key] = self._one(x_t, i)
            rows.append(memo[key])
        return np.array(rows)

    def __getstate__(self):
        state = dict(self.__dict__)
        state.pop("_memo", None)
        return state


class OraclePosterior(_CachedOracle):
    """Bayes-optimal reconstruction ``P(X^i | visible tokens of x_t)``."""

    def __init__(self, joint: TabularJoint):
        self.joint = joint

    @property
    def vocab_size(self):
        return self.joint.V

    @property
    def seq_len(self):
        return self.joint.L

    def _one(self, x_t, i):
        return posterior_predict(self.joint, x_t, i)


class OracleCausal(_CachedOracle):
    """Exact next-token law ``P(X^i | X^{<i})``; the minimiser of the AR loss."""

    context_scope = "unidirectional"

    def __init__(self, joint: TabularJoint):
        self.joint = joint

    @property
    def vocab_size(self):
        return self.joint.V

    @property
    def seq_len(self):
        return self.joint.L

    def _one(self, x_t, i):
        return causal_predict(self.joint, x_t, i)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def design_matrices(batch, spec, L: int):
    """Turn a weighted batch into dense ``(inputs, labels, weights)`` arrays.

    ``batch`` is a sequence of ``(x0, x_t, weight)`` items where ``weight``
    already includes any noise-level weighting. ``weights[n, i]`` is zero on
    positions that do not contribute a loss term.
    """
    n = len(batch)
    inputs = np.empty((n, L), dtype=np.int64)
    labels = np.empty((n, L), dtype=np.int64)
    weights = np.empty((n, L))
    for k, (x0, x_t, w) in enumerate(batch):
        x0 = np.asarray(x0, dtype=np.int64)
        x_t = np.asarray(x_t, dtype=np.int64)
        inputs[k] = x_t if spec.input_masking else x0
        labels[k] = x0
        weights[k] = w * (x_t == MASK) if spec.label_masking else w
    return inputs, labels, weights


class TabularModel(PredictiveModel):
    """One softmax cell per ``(position, visible context)``.

    With unidirectional scope the context of position ``i`` is ``x[:i]``;
    with bidirectional scope it is the whole masked sequence. Looking up a
    context that was never seen in fitting raises
    :class:`ZeroProbabilityContextError`.
    """

    def __init__(self, vocab_size: int = 2, seq_len: int = 2, context_scope: str = "bidirectional"):
        self.vocab_size_ = vocab_size
        self.seq_len_ = seq_len
        self.context_scope = context_scope

    # sklearn introspects __init__ arguments by attribute name
    def get_params(self, deep=True):
        return {"vocab_size": self.vocab_size_, "seq_len": self.seq_len_, "context_scope": self.context_scope}

    @property
    def vocab_size(self):
        return self.vocab_size_

    @property
    def seq_len(self):
        return self.seq_len_

    def cell_key(self, x, i: int):
        if self.context_scope == "unidirectional":
            return (i, tuple(int(v) for v in x[:i]))
        return (i, tuple(int(v) for v in x))

    def with_cells(self, keys, logits) -> "TabularModel":
        m = TabularModel(self.vocab_size_, self.seq_len_, self.context_scope)
        m.cells_ = list(keys)
        m.index_ = {k: n for n, k in enumerate(m.cells_)}
        logits = np.array(logits, dtype=float).reshape(len(m.cells_), self.vocab_size_)
        logits.setflags(write=False)
        m.logits_ = logits
        return m

    @classmethod
    def from_probs(cls, vocab_size, seq_len, context_scope, table: dict, weights: Optional[dict] = None):
        keys = sorted(table)
        with np.errstate(divide="ignore"):
            logits = np.log(np.array([table[k] for k in keys], dtype=float))
        m = cls(vocab_size, seq_len, context_scope).with_cells(keys, logits)
        if weights is not None:
            m.cell_weights_ = np.array([weights[k] for k in keys])
        return m

    @property
    def probs_(self) -> np.ndarray:
        check_is_fitted(self, "logits_")
        return _softmax(self.logits_)

    @property
    def params_(self) -> np.ndarray:
        check_is_fitted(self, "logits_")
        return self.logits_.ravel()

    def with_params(self, vec) -> "TabularModel":
        return self.with_cells(self.cells_, vec)

    def table(self) -> dict:
        return dict(zip(self.cells_, self.probs_))

    def _predict(self, x_t, positions):
        check_is_fitted(self, "logits_")
        rows = []
        for i in positions:
            key = self.cell_key(x_t, i)
            if key not in self.index_:
                raise ZeroProbabilityContextError(f"no cell for position {i} in context {x_t}")
            rows.append(self.index_[key])
        return _softmax(self.logits_[rows])

    def compile_batch(self, batch, spec):
        """Map batch loss terms to ``(cell_index, label, weight)`` arrays."""
        _check_spec_scope(self, spec)
        inputs, labels, weights = design_matrices(batch, spec, self.seq_len_)
        idx, lab, w = [], [], []
        for n in range(len(batch)):
            for i in range(self.seq_len_):
                if weights[n, i] == 0:
                    continue
                key = self.cell_key(inputs[n], i)
                if key not in self.index_:
                    raise ZeroProbabilityContextError(f"batch context {key} has no cell")
                idx.append(self.index_[key])
                lab.append(labels[n, i])
                w.append(weights[n, i])
        return np.array(idx, dtype=np.int64), np.array(lab, dtype=np.int64), np.array(w)

    def loss_and_grad(self, batch=None, spec=None, compiled=None):
        idx, lab, w = compiled if compiled is not None else self.compile_batch(batch, spec)
        logp = _log_softmax(self.logits_)
        loss = -float(np.dot(w, logp[idx, lab]))
        G = np.zeros_like(self.logits_)
        np.add.at(G, idx, w[:, None] * np.exp(logp[idx]))
        np.add.at(G, (idx, lab), -w)
        return loss, G.ravel()

    def fit(self, joint: TabularJoint, objective="bc+im+lm+wf", t_sampler=None, lr: float = 1.0,
            momentum: float = 0.9, max_steps: int = 50000, tol: float = 1e-10):
        """Full-batch gradient descent with momentum on the exact expected loss.

        The batch enumerates every ``(x0, mask pattern)`` pair with its
        probability weight, so the fitted table approximates the closed-form
        optimum of ``objective`` to within the gradient tolerance.
        """
        from .objectives import ObjectiveSpec, TSampler, exact_batch

        spec = ObjectiveSpec.parse(objective)
        sampler = t_sampler or TSampler()
        batch = exact_batch(joint, spec, sampler)
        keys = set()
        inputs, _, weights = design_matrices(batch, spec, self.seq_len_)
        for n in range(len(batch)):
            for i in range(self.seq_len_):
                if weights[n, i] > 0:
                    keys.add(self.cell_key(inputs[n], i))
        model = self.with_cells(sorted(keys), np.zeros((len(keys), self.vocab_size_)))
        compiled = model.compile_batch(batch, spec)
        # normalise each cell's loss by its own weight: a diagonal
        # preconditioner that leaves the per-cell optimum unchanged
        cell_w = np.bincount(compiled[0], weights=compiled[2], minlength=len(keys))
        scale = np.repeat(1.0 / cell_w, self.vocab_size_)
        velocity = np.zeros(model.params_.size)
        self.n_steps_ = 0
        for step in range(max_steps):
            _, g = model.loss_and_grad(compiled=compiled)
            g = g * scale
            if np.max(np.abs(g)) < tol:
                break
            velocity = momentum * velocity + g
            model = sgd_step(model, velocity, lr)
            self.n_steps_ = step + 1
        self.cells_ = model.cells_
        self.index_ = model.index_
        self.logits_ = model.logits_
        self.cell_weights_ = cell_w
        return self


def _check_spec_scope(model, spec):
    if spec.context == "bc" and model.context_scope == "unidirectional":
        raise ValueError("a bidirectional-context objective needs a bidirectional model")


class TrainableModel(PredictiveModel):
    """Small shared-parameter network with hand-written backpropagation.

    Architecture: token + position embeddings, ``n_layers`` of learned
    position-mixing followed by a dense map and ``tanh`` (residual after the
    first layer), then a per-position projection to ``V`` logits. With
    unidirectional scope the first mixing layer only reads positions
    ``j < i`` and later layers ``j <= i``, so output ``i`` depends on inputs
    before ``i`` only.
    """

    def __init__(self, vocab_size: int = 8, seq_len: int = 8, d_model: int = 16, n_layers: int = 2,
                 context_scope: str = "bidirectional", init_scale: float = 0.5, seed: int = 0):
        self.vocab_size_ = vocab_size
        self.seq_len_ = seq_len
        self.d_model = d_model
        self.n_layers = n_layers
        self.context_scope = context_scope
        self.init_scale = init_scale
        self.seed = seed

    def get_params(self, deep=True):
        return {
            "vocab_size": self.vocab_size_, "seq_len": self.seq_len_, "d_model": self.d_model,
            "n_layers": self.n_layers, "context_scope": self.context_scope,
            "init_scale": self.init_scale, "seed": self.seed,
        }

    @property
    def vocab_size(self):
        return self.vocab_size_

    @property
    def seq_len(self):
        return self.seq_len_

    # -- parameter layout -------------------------------------------------
    def _shapes(self):
        V, L, d = self.vocab_size_, self.seq_len_, self.d_model
        shapes = [("E", (V + 1, d)), ("P", (L, d))]
        for l in range(self.n_layers):
            shapes += [(f"A{l}", (L, L)), (f"W{l}", (d, d)), (f"c{l}", (d,))]
        shapes += [("U", (L, d, V)), ("u", (L, V))]
        return shapes

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self._shapes())

    def _unpack(self, vec):
        out, k = {}, 0
        for name, shape in self._shapes():
            n = int(np.prod(shape))
            out[name] = vec[k:k + n].reshape(shape)
            k += n
        return out

    def _masks(self):
        L = self.seq_len_
        if self.context_scope == "unidirectional":
            first = np.tril(np.ones((L, L)), k=-1)
            rest = np.tril(np.ones((L, L)))
        else:
            first = rest = np.ones((L, L))
        return [first] + [rest] * (self.n_layers - 1)

    def initialize(self) -> "TrainableModel":
        _check_scope(self.context_scope)
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.n_params > 10**5:
            raise ValueError(f"{self.n_params} parameters exceeds the 1e5 budget")
        rng = np.random.default_rng(self.seed)
        pieces = []
        s = self.init_scale
        for name, shape in self._shapes():
            if name in ("E", "P"):
                pieces.append(rng.uniform(-s, s, size=shape))
            elif name.startswith("A"):
                pieces.append(rng.uniform(-1, 1, size=shape) / shape[0])
            elif name.startswith("W"):
                pieces.append(rng.uniform(-1, 1, size=shape) / np.sqrt(shape[0]))
            else:
                pieces.append(np.zeros(shape))
        return self.with_params(np.concatenate([p.ravel() for p in pieces]))

    def with_params(self, vec) -> "TrainableModel":
        m = copy.copy(self)
        vec = np.array(vec, dtype=float)
        if vec.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {vec.size}")
        vec.setflags(write=False)
        m.params_ = vec
        return m

    # -- forward / backward -----------------------------------------------
    def _encode(self, X):
        X = np.asarray(X, dtype=np.int64)
        return np.where(X == MASK, self.vocab_size_, X)

    def _forward(self, X, keep=False):
        p = self._unpack(self.params_)
        ids = self._encode(X)
        H = p["E"][ids] + p["P"][None]
        cache = [("in", ids, H)]
        for l, M in enumerate(self._masks()):
            A = p[f"A{l}"] * M
            mixed = np.einsum("ij,njd->nid", A, H)
            act = np.tanh(mixed @ p[f"W{l}"] + p[f"c{l}"])
            H_new = act if l == 0 else H + act
            cache.append((A, H, mixed, act))
            H = H_new
        logits = np.einsum("nid,idv->niv", H, p["U"]) + p["u"][None]
        return (logits, H, cache) if keep else logits

    def forward(self, x_t) -> np.ndarray:
        """Per-position distributions, shape ``(L, V)``."""
        check_is_fitted(self, "params_")
        x_t = check_masked(x_t, self.vocab_size_, self.seq_len_)
        return _softmax(self._forward(np.array([x_t]))[0])

    def _predict(self, x_t, positions):
        return self.forward(x_t)[positions]

    def loss_and_grad(self, batch, spec):
        check_is_fitted(self, "params_")
        _check_spec_scope(self, spec)
        if spec.context == "uc" and self.context_scope != "unidirectional":
            raise ValueError("a unidirectional-context objective needs a unidirectional model")
        inputs, labels, weights = design_matrices(batch, spec, self.seq_len_)
        return self._loss_and_grad_arrays(inputs, labels, weights)

    def _loss_and_grad_arrays(self, inputs, labels, weights):
        p = self._unpack(self.params_)
        logits, H, cache = self._forward(inputs, keep=True)
        logp = _log_softmax(logits)
        n, L = labels.shape
        picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
        loss = -float((weights * picked).sum())
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite loss")

        g = {name: np.zeros(shape) for name, shape in self._shapes()}
        dlogits = np.exp(logp)
        np.put_along_axis(dlogits, labels[..., None],
                          np.take_along_axis(dlogits, labels[..., None], axis=-1) - 1.0, axis=-1)
        dlogits *= weights[..., None]
        g["U"] = np.einsum("nid,niv->idv", H, dlogits)
        g["u"] = dlogits.sum(axis=0)
        dH = np.einsum("niv,idv->nid", dlogits, p["U"])
        for l in range(self.n_layers - 1, -1, -1):
            A, H_prev, mixed, act = cache[l + 1]
            dz = dH * (1.0 - act**2)
            g[f"W{l}"] = np.einsum("nid,nie->de", mixed, dz)
            g[f"c{l}"] = dz.sum(axis=(0, 1))
            dmixed = dz @ p[f"W{l}"].T
            g[f"A{l}"] = np.einsum("nid,njd->ij", dmixed, H_prev) * self._masks()[l]
            dH_prev = np.einsum("ij,nid->njd", A, dmixed)
            dH = dH_prev if l == 0 else dH + dH_prev
        ids = cache[0][1]
        np.add.at(g["E"], ids.ravel(), dH.reshape(-1, self.d_model))
        g["P"] = dH.sum(axis=0)
        flat = np.concatenate([g[name].ravel() for name, _ in self._shapes()])
        return loss, flat

    def fit(self, X, objective="bc+im+lm+wf", n_steps: int = 200, lr: float = 0.05, momentum: float = 0.9,
            batch_size: int = 64, t_sampler=None, eval_set=None, ntp_target: Optional[float] = None,
            eval_every: int = 10, callback=None):
        """Minibatch SGD on a corpus ``X`` of clean sequences.

        Training stops early once the next-token loss on ``eval_set`` (a
        corpus or a :class:`TabularJoint`) drops to ``ntp_target``.
        """
        from .objectives import ObjectiveSpec, TSampler, mc_batch, ntp_eval_loss

        spec = ObjectiveSpec.parse(objective)
        sampler = t_sampler or TSampler()
        X = [tuple(x) for x in X]
        if not X:
            raise ValueError("empty training corpus")
        model = self if hasattr(self, "params_") else self.initialize()
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(1,)))
        velocity = np.zeros(model.n_params)
        self.history_ = []
        stopped = 0
        for step in range(n_steps):
            if ntp_target is not None and eval_set is not None and step % eval_every == 0:
                ntp = ntp_eval_loss(model, eval_set)
                self.history_.append({"step": step, "ntp_loss": ntp})
                if ntp <= ntp_target:
                    break
            rows = rng.integers(len(X), size=batch_size)
            batch = mc_batch([X[r] for r in rows], spec, sampler, rng)
            loss, g = model.loss_and_grad(batch, spec)
            if callback is not None:
                callback(step, loss)
            velocity = momentum * velocity + g
            model = sgd_step(model, velocity, lr)
            stopped = step + 1
        self.params_ = model.params_
        self.n_steps_ = stopped
        return self


def grad(model, batch, spec) -> np.ndarray:
    """Analytic gradient of the weighted batch loss w.r.t. the flat parameters."""
    return model.loss_and_grad(batch, spec)[1]


def sgd_step(model, g, lr: float):
    """Return a new model with parameters ``params - lr * g``."""
    if lr == 0:
        return model.with_params(model.params_)
    return model.with_params(model.params_ - lr * np.asarray(g))


def model_to_dict(model) -> dict:
    if isinstance(model, TrainableModel):
        arch = model.get_params()
        seed = arch.pop("seed")
        return {"kind": "trainable", "arch": arch, "seed": seed, "params": model.params_.tolist()}
    if isinstance(model, TabularModel):
        return {
            "kind": "tabular",
            "arch": model.get_params(),
            "cells": [[i, list(ctx)] for i, ctx in model.cells_],
            "params": model.params_.tolist(),
        }
    if isinstance(model, OracleFactorized):
        return {"kind": "oracle_factorized", "dist": model.dist.to_dict()}
    if isinstance(model, OraclePosterior):
        return {"kind": "oracle_posterior", "joint": model.joint.to_dict()}
    if isinstance(model, OracleCausal):
        return {"kind": "oracle_causal", "joint": model.joint.to_dict()}
    raise TypeError(f"cannot serialise {type(model).__name__}")


def model_from_dict(d: dict):
    kind = d["kind"]
    if kind == "trainable":
        return TrainableModel(seed=d["seed"], **d["arch"]).with_params(d["params"])
    if kind == "tabular":
        keys = [(int(i), tuple(ctx)) for i, ctx in d["cells"]]
        return TabularModel(**d["arch"]).with_cells(keys, d["params"])
    if kind == "oracle_factorized":
        return OracleFactorized(FactorizedDist.from_dict(d["dist"]))
    if kind == "oracle_posterior":
        return OraclePosterior(TabularJoint.from_dict(d["joint"]))
    if kind == "oracle_causal":
        return OracleCausal(TabularJoint.from_dict(d["joint"]))
    raise ValueError(f"unknown model kind {kind!r}")
