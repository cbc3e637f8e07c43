"""Numerical verification of the entropy-reduction result for confidence remasking.

Under a factorised data law with an exactly fitted model, (dynamic)
low-confidence remasking yields a generation distribution whose
per-position conditionals majorise the data marginals, hence lower
entropy. Everything here works on exact enumerations.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .core import DEFAULT_CAP, FactorizedDist, TabularJoint, entropy, factorized_to_joint, joint_entropy
from .decoding import DecodeConfig, decode_corpus, exact_generation_distribution, exact_paths
from .metrics import ar_entropy_mc, cross_entropy, exact_cross_entropy
from .models import OracleFactorized

__all__ = [
    "MajorizationCheck",
    "check_majorization",
    "case1_conditional",
    "case2_conditional",
    "trace_conditionals",
    "proof_formula_deviation",
    "conditional_majorization",
    "gibbs_check",
    "verify_entropy_reduction",
    "theorem_sweep",
    "InequalityChainReport",
    "inequality_chain",
]

GAP_TOL = 1e-12


@dataclass
class MajorizationCheck:
    order: list
    q_sorted: list
    p_sorted: list
    gaps: list
    passed: bool
    entropy_p: float
    entropy_q: float

    @property
    def schur_consistent(self) -> bool:
        """On a pass, entropy of ``p`` must not exceed that of ``q``."""
        return (not self.passed) or self.entropy_p <= self.entropy_q + 1e-12


def check_majorization(p, q, atol: float = GAP_TOL) -> MajorizationCheck:
    """Prefix sums of ``p`` against those of ``q``, both in ``q``'s descending class order."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    order = np.argsort(-q, kind="stable")
    gaps = np.cumsum(p[order]) - np.cumsum(q[order])
    return MajorizationCheck(
        order=order.tolist(), q_sorted=q[order].tolist(), p_sorted=p[order].tolist(),
        gaps=gaps.tolist(), passed=bool(np.all(gaps >= -atol)),
        entropy_p=entropy(p), entropy_q=entropy(q))


def _marginals(q):
    return q.marginals if isinstance(q, FactorizedDist) else np.atleast_2d(np.asarray(q, dtype=float))


def case1_conditional(q, i: int, T, tau: float) -> np.ndarray:
    """Law of ``X^i`` given it is decoded alone while ``T \\ {i}`` is remasked.

    ``c`` gets weight ``q^i_c * prod_j sum_{r: q^j_r <= min(tau, q^i_c)} q^j_r``
    over ``j`` in ``T \\ {i}``. An exact confidence tie at ``q^i_c`` is won by
    the lower position index, so for ``j < i`` equality is excluded.
    """
    Q = _marginals(q)
    T = set(int(j) for j in T)
    if i not in T:
        raise ValueError(f"position {i} must belong to T={sorted(T)}")
    qi = Q[i]
    w = np.ones_like(qi)
    for c, qc in enumerate(qi):
        bound = min(tau, qc)
        for j in T - {i}:
            qj = Q[j]
            if j < i:
                ok = (qj <= tau) & (qj < qc) if qc <= tau else qj <= tau
            else:
                ok = qj <= bound
            w[c] *= qj[ok].sum()
    u = qi * w
    if u.sum() <= 0:
        raise ValueError("case-1 event has zero probability")
    return u / u.sum()


def case2_conditional(q, i: int, tau: float) -> np.ndarray:
    """Law of ``X^i`` decoded together with others: ``q^i`` truncated to ``> tau``."""
    qi = _marginals(q)[i]
    u = qi * (qi > tau)
    if u.sum() <= 0:
        raise ValueError(f"no class at position {i} exceeds tau={tau}")
    return u / u.sum()


def trace_conditionals(q: FactorizedDist, cfg: DecodeConfig, cap: int = DEFAULT_CAP, selector=None):
    """Yield per-configuration conditionals of ``X^i`` from full path enumeration.

    Each item is ``(i, z, others, conditional)`` where the conditioning fixes
    every decode step ``z`` and every other token.
    """
    model = OracleFactorized(q)
    paths = exact_paths(model, (), q.L, cfg, cap=cap, selector=selector)
    for i in range(q.L):
        groups: dict = {}
        for (x, z), p in paths.items():
            key = (z, x[:i] + x[i + 1:])
            vec = groups.setdefault(key, np.zeros(q.V))
            vec[x[i]] += p
        for (z, others), vec in sorted(groups.items()):
            yield i, z, others, vec / vec.sum()


def proof_formula_deviation(q: FactorizedDist, B: int, tau: float, cap: int = DEFAULT_CAP) -> dict:
    """Max deviation between the case-1/case-2 formulas and enumerated conditionals."""
    cfg = DecodeConfig("dynamic_low_confidence", B, B, tau=tau)
    worst = {"case1": 0.0, "case2": 0.0, "n_case1": 0, "n_case2": 0}
    for i, z, _, cond in trace_conditionals(q, cfg, cap):
        S = [j for j in range(q.L) if z[j] == z[i]]
        if len(S) == 1:
            T = [j for j in range(q.L) if j // B == i // B and z[j] >= z[i]]
            ref = case1_conditional(q, i, T, tau)
            tag = "case1"
        else:
            ref = case2_conditional(q, i, tau)
            tag = "case2"
        worst[tag] = max(worst[tag], float(np.abs(ref - cond).max()))
        worst["n_" + tag] += 1
    return worst


def conditional_majorization(gen: TabularJoint, q: FactorizedDist) -> dict:
    """Check ``P(X^i | X^{<i}=prefix)`` majorises ``q^i`` for every positive prefix."""
    table = gen.table
    n_checked = 0
    violations = 0
    min_gap = math.inf
    for i in range(gen.L):
        for prefix in itertools.product(range(gen.V), repeat=i):
            sub = table[prefix] if prefix else table
            mass = sub.sum()
            if mass <= 0:
                continue
            cond = sub.sum(axis=tuple(range(1, sub.ndim))) / mass
            chk = check_majorization(cond, q.marginals[i])
            n_checked += 1
            min_gap = min(min_gap, min(chk.gaps))
            if not chk.passed or not chk.schur_consistent:
                violations += 1
    return {"checked": n_checked, "violations": violations, "min_gap": min_gap}


def gibbs_check(p: TabularJoint, q: TabularJoint, atol: float = 1e-12) -> dict:
    """``H(p) <= H(p, q)``, with equality iff ``p == q``."""
    h = joint_entropy(p)
    try:
        hx = exact_cross_entropy(p, q, per_token=False)
    except ValueError:
        hx = math.inf
    equal = bool(np.allclose(p.probs, q.probs, atol=atol, rtol=0))
    ok = h <= hx + atol
    if equal:
        ok = ok and abs(hx - h) <= atol
    return {"H": h, "cross": hx, "identical": equal, "ok": bool(ok)}


def verify_entropy_reduction(q: FactorizedDist, grid, slack: float = 1e-9, cap: int = DEFAULT_CAP,
                    selector=None) -> list:
    """Exact check of both entropy inequalities on each ``(B, tau)`` of ``grid``.

    Returns one row per grid cell with the entropies, the conditional
    majorisation counts and a ``pass`` flag.
    """
    model = OracleFactorized(q)
    h_data = joint_entropy(factorized_to_joint(q, cap))
    rows = []
    lcr_cache: dict = {}
    for B, tau in grid:
        if q.L % B:
            raise ValueError(f"block length {B} does not divide L={q.L}")
        if B not in lcr_cache:
            lcr = exact_generation_distribution(model, (), q.L, DecodeConfig("low_confidence", B), cap, selector)
            lcr_cache[B] = (lcr, joint_entropy(lcr), conditional_majorization(lcr, q))
        lcr, h_lcr, maj_lcr = lcr_cache[B]
        dl = exact_generation_distribution(
            model, (), q.L, DecodeConfig("dynamic_low_confidence", B, tau=tau), cap, selector)
        h_dlcr = joint_entropy(dl)
        maj_dlcr = conditional_majorization(dl, q)
        ok = (h_lcr <= h_data + slack and h_dlcr <= h_data + slack
              and maj_lcr["violations"] == 0 and maj_dlcr["violations"] == 0)
        rows.append({
            "q": q.marginals.tolist(), "B": B, "tau": tau, "H_data": h_data, "H_lcr": h_lcr,
            "H_dlcr": h_dlcr, "majorization_violations": maj_lcr["violations"] + maj_dlcr["violations"],
            "pass": bool(ok),
        })
    return rows


def _tied_instance(V, L, rng) -> FactorizedDist:
    # coarse grid values make exact confidence ties across positions likely
    rows = []
    for _ in range(L):
        w = rng.integers(1, 4, size=V).astype(float)
        rows.append(w / w.sum())
    return FactorizedDist(rows, atol=1e-12)


def theorem_sweep(n_instances: int = 200, seed: int = 0, V_max: int = 4, L_max: int = 4,
                  block_lengths=(1, 2, 4), taus=(0.5, 0.9, 1.0), tie_every: int = 10,
                  cap: int = DEFAULT_CAP, selector=None) -> dict:
    """Randomised check over factorised instances; every ``tie_every``-th has ties."""
    rng = np.random.default_rng(seed)
    instances = []
    for n in range(n_instances):
        V = int(rng.integers(2, V_max + 1))
        L = int(rng.integers(1, L_max + 1))
        if tie_every and n % tie_every == tie_every - 1:
            q = _tied_instance(V, L, rng)
        else:
            q = FactorizedDist(rng.dirichlet(np.ones(V), size=L))
        Bs = [B for B in block_lengths if L % B == 0]
        grid = [(B, tau) for B in Bs for tau in taus]
        instances.extend(verify_entropy_reduction(q, grid, cap=cap, selector=selector))
    violations = sum(not r["pass"] for r in instances)
    return {"instances": instances, "violations": violations,
            "config": {"n_instances": n_instances, "seed": seed, "V_max": V_max, "L_max": L_max,
                       "block_lengths": list(block_lengths), "taus": list(taus), "tie_every": tie_every}}


@dataclass
class InequalityChainReport:
    strategy: str
    H_con: Optional[float]
    H_con_seq: float
    H_seq: float
    delta: float
    exact: bool
    gibbs_holds: Optional[bool]
    ii_holds: bool
    stderr: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def inequality_chain(model, prompts, strategies, exact: bool = True, n_samples: int = 200,
                     seed: int = 0, tol: float = 1e-10, cap: int = DEFAULT_CAP) -> list:
    """Compare each strategy's law with sequential decoding of the same model.

    Exact mode enumerates all laws; MC mode samples corpora, in which case
    ``H_con`` is not estimated and only its Gibbs upper bound ``H_con_seq``
    is reported. ``ii_holds`` means ``delta`` is (significantly) positive.
    """
    prompts = [tuple(p) for p in prompts] or [()]
    L_total = model.seq_len
    seq_cfg = DecodeConfig("sequential", 1, seed=seed)
    reports = []
    if exact:
        seq = [exact_generation_distribution(model, c, L_total, seq_cfg, cap) for c in prompts]
        h_seq = float(np.mean([joint_entropy(p, per_token=True) for p in seq]))
        for cfg in strategies:
            con = [exact_generation_distribution(model, c, L_total, cfg, cap) for c in prompts]
            h_con = float(np.mean([joint_entropy(p, per_token=True) for p in con]))
            h_x = float(np.mean([exact_cross_entropy(a, b) for a, b in zip(con, seq)]))
            delta = h_seq - h_x
            reports.append(InequalityChainReport(
                strategy=cfg.label, H_con=h_con, H_con_seq=h_x, H_seq=h_seq, delta=delta, exact=True,
                gibbs_holds=h_con <= h_x + 1e-12, ii_holds=delta > tol, config=cfg.to_dict()))
        return reports
    h_seq, se_seq = ar_entropy_mc(model, prompts, n_samples, seed=seed)
    for cfg in strategies:
        corpus = decode_corpus(model, prompts, L_total, cfg, n_samples)
        h_x, se_x = cross_entropy(corpus, model)
        delta = h_seq - h_x
        se = math.hypot(se_seq, se_x)
        reports.append(InequalityChainReport(
            strategy=cfg.label, H_con=None, H_con_seq=h_x, H_seq=h_seq, delta=delta, exact=False,
            gibbs_holds=None, ii_holds=delta > 3 * se, stderr={"H_con_seq": se_x, "H_seq": se_seq},
            config=cfg.to_dict()))
    return reports
