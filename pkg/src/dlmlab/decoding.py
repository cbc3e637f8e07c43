"""Block-wise masked denoising with pluggable remasking strategies.

Generation fills the positions after the prompt block by block. Within a
block, each step proposes a token at every still-masked position, keeps a
subset chosen by the strategy and reverts the rest to MASK.

Two execution paths share the same selection rules:

* :func:`decode_sample` draws one trajectory with an explicit RNG;
* :func:`exact_generation_distribution` sums path probabilities over every
  stochastic branch (a forward pass over partially decoded states, merging
  identical states), giving the exact generation law.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import DEFAULT_CAP, MASK, EnumerationCapError, TabularJoint, check_sequence
from .models import check_distribution_rows

__all__ = [
    "STRATEGIES",
    "CONFIDENCE_STRATEGIES",
    "DecodeConfig",
    "StepRecord",
    "DecodeTrace",
    "Sample",
    "decode_sample",
    "decode_corpus",
    "exact_generation_distribution",
    "exact_paths",
    "write_corpus",
    "read_corpus",
]

STRATEGIES = ("sequential", "low_confidence", "dynamic_low_confidence", "high_entropy", "random")
CONFIDENCE_STRATEGIES = ("low_confidence", "dynamic_low_confidence")

Selector = Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "low_confidence"
    block_length: int = 1
    steps: Optional[int] = None
    tau: float = 0.9
    bias_elim: bool = False
    seed: int = 0
    temperature: float = 1.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.block_length < 1:
            raise ValueError("block_length must be >= 1")
        if self.steps is None:
            object.__setattr__(self, "steps", self.block_length)
        if self.steps < 1 or self.block_length % self.steps:
            raise ValueError(f"steps={self.steps} must divide block_length={self.block_length}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.strategy == "sequential" and self.block_length != 1:
            raise ValueError("sequential decoding uses block_length 1")
        if self.temperature != 1.0:
            raise ValueError("only temperature 1.0 is supported")

    @property
    def per_step(self) -> int:
        return self.block_length // self.steps

    @property
    def label(self) -> str:
        s = f"{self.strategy}_B{self.block_length}"
        return s + "_be" if self.bias_elim else s

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DecodeConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown decode config keys {sorted(extra)}")
        return cls(**d)


@dataclass
class StepRecord:
    block: int
    step: int
    masked: list
    proposals: list
    confidence: list
    entropy: list
    kept: list
    tokens: list
    prob: float


@dataclass
class DecodeTrace:
    steps: list = field(default_factory=list)
    decode_step: dict = field(default_factory=dict)

    @property
    def path_prob(self) -> float:
        """Product of proposal, selection and redraw probabilities."""
        return math.prod(s.prob for s in self.steps)

    def to_dict(self) -> dict:
        return {"steps": [asdict(s) for s in self.steps],
                "decode_step": {str(k): v for k, v in self.decode_step.items()}}


@dataclass
class Sample:
    prompt: tuple
    tokens: tuple
    id: Optional[str] = None
    trace: Optional[DecodeTrace] = None

    def to_dict(self, with_trace: bool = True) -> dict:
        d = {"id": self.id, "prompt": list(self.prompt), "tokens": list(self.tokens)}
        if with_trace and self.trace is not None:
            d["trace"] = self.trace.to_dict()
        return d


# -- selection rules --------------------------------------------------------

def _row_entropy(P: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(P > 0, P * np.log(P), 0.0)
    return -t.sum(axis=-1)


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest scores per row; ties go to lower index."""
    order = np.argsort(-scores, axis=-1, kind="stable")
    keep = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(keep, order[..., :k], True, axis=-1)
    return keep


def select_by_confidence(conf: np.ndarray, k: int, tau: Optional[float] = None) -> np.ndarray:
    """Kept positions for (dynamic) low-confidence remasking, row-wise."""
    top = _top_k(conf, k)
    if tau is None:
        return top
    above = conf > tau
    enough = above.sum(axis=-1) >= k
    return np.where(enough[..., None], above, top)


def keep_least_confident(conf: np.ndarray, k: int) -> np.ndarray:
    """Inverted selection; used as a mutation that must break the theory."""
    return _top_k(-conf, k)


def _confidence_rule(cfg: DecodeConfig, selector: Optional[Selector]):
    if selector is not None:
        return lambda conf, k: selector(conf, k)
    tau = cfg.tau if cfg.strategy == "dynamic_low_confidence" else None
    return lambda conf, k: select_by_confidence(conf, k, tau)


def _outcome_dependent(cfg: DecodeConfig, selector) -> bool:
    return selector is not None or cfg.strategy in CONFIDENCE_STRATEGIES or cfg.strategy == "sequential"


# -- sampling ---------------------------------------------------------------

def _draw(P: np.ndarray, rng) -> np.ndarray:
    cdf = np.cumsum(P, axis=-1)
    u = rng.random(P.shape[0]) * cdf[:, -1]
    idx = np.array([np.searchsorted(c, v, side="right") for c, v in zip(cdf, u)], dtype=np.int64)
    return np.minimum(idx, P.shape[1] - 1)


def _blocks(start: int, L_total: int, B: int):
    if (L_total - start) % B:
        raise ValueError(f"generated length {L_total - start} is not divisible by block length {B}")
    return [list(range(s, s + B)) for s in range(start, L_total, B)]


def _check_prompt(model, prompt, L_total):
    prompt = tuple(prompt)
    if prompt:
        check_sequence(prompt, model.vocab_size)
    if len(prompt) >= L_total:
        raise ValueError(f"prompt length {len(prompt)} must be below L_total={L_total}")
    if model.seq_len != L_total:
        raise ValueError(f"model has seq_len {model.seq_len}, decoding asked for {L_total}")
    return prompt


def decode_sample(model, prompt, L_total: int, cfg: DecodeConfig, rng, selector: Optional[Selector] = None):
    """Generate one continuation; returns ``(tokens, DecodeTrace)``.

    ``tokens`` covers the generated positions only.
    """
    prompt = _check_prompt(model, prompt, L_total)
    rng = np.random.default_rng(rng)
    x = list(prompt) + [MASK] * (L_total - len(prompt))
    k = cfg.per_step
    confidence_rule = _confidence_rule(cfg, selector)
    trace = DecodeTrace()
    global_step = 0
    for b, block in enumerate(_blocks(len(prompt), L_total, cfg.block_length)):
        step = 0
        while True:
            masked = [i for i in block if x[i] == MASK]
            if not masked:
                break
            m = len(masked)
            P = check_distribution_rows(model.predict_proba(tuple(x), masked))
            proposals = _draw(P, rng)
            conf = P[np.arange(m), proposals]
            ent = _row_entropy(P)
            kk = min(k, m)
            prob = float(np.prod(conf))
            if _outcome_dependent(cfg, selector):
                keep = confidence_rule(conf[None], kk)[0]
            elif cfg.strategy == "high_entropy":
                keep = _top_k(-ent[None], kk)[0]
            else:
                keep = np.zeros(m, dtype=bool)
                keep[rng.choice(m, size=kk, replace=False)] = True
                prob /= math.comb(m, kk)
            tokens = proposals.copy()
            if cfg.bias_elim:
                redrawn = _draw(P[keep], rng)
                tokens[keep] = redrawn
                prob *= float(np.prod(P[keep][np.arange(keep.sum()), redrawn]))
            kept = [masked[j] for j in np.flatnonzero(keep)]
            for j in np.flatnonzero(keep):
                x[masked[j]] = int(tokens[j])
                trace.decode_step[masked[j]] = global_step
            trace.steps.append(StepRecord(
                block=b, step=step, masked=masked, proposals=proposals.tolist(), confidence=conf.tolist(),
                entropy=ent.tolist(), kept=kept, tokens=[int(tokens[j]) for j in np.flatnonzero(keep)],
                prob=prob))
            step += 1
            global_step += 1
    return tuple(x[len(prompt):]), trace


def _sample_one(model, prompt, L_total, cfg, seq, keep_trace, sample_id):
    tokens, trace = decode_sample(model, prompt, L_total, cfg, np.random.default_rng(seq))
    return Sample(tuple(prompt), tokens, sample_id, trace if keep_trace else None)


def decode_corpus(model, prompts, L_total: int, cfg: DecodeConfig, samples_per_prompt: int,
                  keep_traces: bool = False, n_jobs: int = 1) -> list:
    """Seeded corpus; sample ``(p, s)`` uses the RNG stream ``spawn_key=(p, s)``."""
    jobs = []
    for p, prompt in enumerate(prompts):
        for s in range(samples_per_prompt):
            seq = np.random.SeedSequence(cfg.seed, spawn_key=(p, s))
            jobs.append((tuple(prompt), seq, f"{p}-{s}"))
    if n_jobs == 1 or len(jobs) < 2:
        return [_sample_one(model, pr, L_total, cfg, seq, keep_traces, sid) for pr, seq, sid in jobs]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=n_jobs)(
        delayed(_sample_one)(model, pr, L_total, cfg, seq, keep_traces, sid) for pr, seq, sid in jobs)


# -- exact enumeration ------------------------------------------------------

def _grid(P: np.ndarray, cols, cap: int, where: str):
    """All joint values over ``cols`` restricted to the support, with probabilities."""
    supports = [np.flatnonzero(P[j] > 0) for j in cols]
    n = math.prod(len(s) for s in supports)
    if n > cap:
        raise EnumerationCapError(f"{n} proposal branches at {where} exceed cap {cap}")
    if not cols:
        return np.zeros((1, 0), dtype=np.int64), np.ones(1)
    vals = np.array(list(itertools.product(*supports)), dtype=np.int64).reshape(n, len(cols))
    probs = np.prod(P[np.asarray(cols)[None, :], vals], axis=1)
    return vals, probs


def _step_outcomes(P, cfg, k, cap, where, selector):
    """Exact law of one step: list of ``(keep_mask, kept_values, prob)``."""
    m = P.shape[0]
    cols = list(range(m))
    if _outcome_dependent(cfg, selector):
        vals, probs = _grid(P, cols, cap, where)
        conf = P[np.arange(m)[None, :], vals]
        keep = _confidence_rule(cfg, selector)(conf, k)
        if not cfg.bias_elim:
            key = np.where(keep, vals, -1)
            uniq, inv = np.unique(key, axis=0, return_inverse=True)
            w = np.bincount(inv.ravel(), weights=probs, minlength=len(uniq))
            return [(row >= 0, row, p) for row, p in zip(uniq, w)]
        uniq, inv = np.unique(keep, axis=0, return_inverse=True)
        w = np.bincount(inv.ravel(), weights=probs, minlength=len(uniq))
        masks = list(zip(uniq, w))
    elif cfg.strategy == "high_entropy":
        keep = _top_k(-_row_entropy(P)[None], k)[0]
        masks = [(keep, 1.0)]
    else:
        combos = list(itertools.combinations(range(m), k))
        masks = []
        for c in combos:
            keep = np.zeros(m, dtype=bool)
            keep[list(c)] = True
            masks.append((keep, 1.0 / len(combos)))
    out = []
    for keep, pm in masks:
        sel = list(np.flatnonzero(keep))
        vals, probs = _grid(P, sel, cap, where)
        for v, p in zip(vals, probs):
            row = np.full(m, -1, dtype=np.int64)
            row[sel] = v
            out.append((keep, row, pm * p))
    return out


def _run_exact(model, prompt, L_total, cfg, cap, track_steps, selector):
    prompt = _check_prompt(model, prompt, L_total)
    L_gen = L_total - len(prompt)
    start = tuple(prompt) + (MASK,) * L_gen
    z0 = (-1,) * L_total
    k = cfg.per_step
    # state: (x, z, global step); z is dropped when not tracking
    frontier = {(start, z0 if track_steps else None, 0): 1.0}
    for b, block in enumerate(_blocks(len(prompt), L_total, cfg.block_length)):
        done: dict = {}
        level = 0
        while frontier:
            nxt: dict = {}
            for (x, z, g), p in frontier.items():
                masked = [i for i in block if x[i] == MASK]
                if not masked:
                    done[(x, z, g)] = done.get((x, z, g), 0.0) + p
                    continue
                P = check_distribution_rows(model.predict_proba(x, masked))
                where = f"block {b}, step {level}"
                for keep, row, q in _step_outcomes(P, cfg, min(k, len(masked)), cap, where, selector):
                    if q == 0:
                        continue
                    xs = list(x)
                    zs = list(z) if track_steps else None
                    for j in np.flatnonzero(keep):
                        xs[masked[j]] = int(row[j])
                        if track_steps:
                            zs[masked[j]] = g
                    key = (tuple(xs), tuple(zs) if track_steps else None, g + 1 if track_steps else 0)
                    nxt[key] = nxt.get(key, 0.0) + p * q
            frontier = nxt
            level += 1
        frontier = done
    return frontier, len(prompt)


def exact_generation_distribution(model, prompt, L_total: int, cfg: DecodeConfig, cap: int = DEFAULT_CAP,
                                  selector: Optional[Selector] = None) -> TabularJoint:
    """Exact law of the generated positions as a :class:`TabularJoint`."""
    states, start = _run_exact(model, prompt, L_total, cfg, cap, False, selector)
    mapping: dict = {}
    for (x, _, _), p in states.items():
        mapping[x[start:]] = mapping.get(x[start:], 0.0) + p
    return TabularJoint.from_mapping(model.vocab_size, L_total - start, mapping, atol=1e-10)


def exact_paths(model, prompt, L_total: int, cfg: DecodeConfig, cap: int = DEFAULT_CAP,
                selector: Optional[Selector] = None) -> dict:
    """Joint law of ``(tokens, decode steps)`` over the generated positions.

    Keys are ``(tokens, z)`` where ``z[i]`` is the global step index at
    which generated position ``i`` was decoded.
    """
    states, start = _run_exact(model, prompt, L_total, cfg, cap, True, selector)
    return {(x[start:], z[start:]): p for (x, z, _), p in states.items()}


# -- corpus IO --------------------------------------------------------------

def write_corpus(path, samples, with_traces: bool = True) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(with_traces)) + "\n")


def read_corpus(path) -> list:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out.append(Sample(tuple(d.get("prompt", [])), tuple(d["tokens"]), d.get("id")))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed corpus line ({exc})") from None
    return out
