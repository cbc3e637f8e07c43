"""Acceptance criteria, one check per criterion.

Run ``pytest tests/test_acceptance.py`` (a PASS/FAIL summary line per
criterion is printed at the end) or ``python3 tests/test_acceptance.py``.
"""
import json
import math
import shutil
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from dlmlab import cli
from dlmlab.core import FactorizedDist, entropy, factorized_to_joint, joint_entropy, random_joint
from dlmlab.decoding import DecodeConfig, exact_generation_distribution
from dlmlab.metrics import HashProjectionEmbedder, TableEmbedder, ar_entropy_mc, coherence, diversity, ngram_entropy
from dlmlab.models import OracleFactorized, OraclePosterior, TabularModel, TrainableModel
from dlmlab.objectives import OBJECTIVE_CODES, ObjectiveSpec, TSampler, mc_batch, objective_optimum
from dlmlab.theory import inequality_chain, proof_formula_deviation, theorem_sweep

RESULTS: dict = {}


def _hand():
    return FactorizedDist([[0.9, 0.1], [0.6, 0.4]])


def criterion_1():
    t0 = time.perf_counter()
    sweep = theorem_sweep(200, seed=0, V_max=4, L_max=4, block_lengths=(1, 2, 4), taus=(0.5, 0.9, 1.0))
    elapsed = time.perf_counter() - t0
    ok = sweep["violations"] == 0 and elapsed < 120
    return ok, f"{len(sweep['instances'])} cells, {sweep['violations']} violations, {elapsed:.1f}s"


def criterion_2():
    m = OracleFactorized(_hand())
    lcr = exact_generation_distribution(m, (), 2, DecodeConfig("low_confidence", 2))
    be = exact_generation_distribution(m, (), 2, DecodeConfig("low_confidence", 2, bias_elim=True))
    err_lcr = float(np.abs(lcr.probs - [0.594, 0.396, 0.006, 0.004]).max())
    err_be = float(np.abs(be.probs - [0.54, 0.36, 0.06, 0.04]).max())
    h_data = entropy([0.9, 0.1]) + entropy([0.6, 0.4])
    h_lcr = joint_entropy(lcr)
    ok = err_lcr <= 1e-12 and err_be <= 1e-12 and h_lcr < h_data
    return ok, f"lcr err {err_lcr:.1e}, be err {err_be:.1e}, H_lcr {h_lcr:.6f} < H_data {h_data:.6f}"


def criterion_3():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        V, L = int(rng.integers(2, 4)), int(rng.choice([2, 4]))
        f = FactorizedDist(rng.dirichlet(np.ones(V), size=L))
        data = factorized_to_joint(f)
        m = OracleFactorized(f)
        cfgs = [DecodeConfig("high_entropy", L), DecodeConfig("random", L),
                DecodeConfig("low_confidence", L, bias_elim=True),
                DecodeConfig("dynamic_low_confidence", L, tau=0.5, bias_elim=True),
                DecodeConfig("high_entropy", L, bias_elim=True), DecodeConfig("random", L, bias_elim=True)]
        for cfg in cfgs:
            worst = max(worst, exact_generation_distribution(m, (), L, cfg).total_variation(data))
    return worst <= 1e-10, f"max TV {worst:.1e} over 20 instances"


def criterion_4():
    rng = np.random.default_rng(4)
    instances = [_hand()] + [FactorizedDist(rng.dirichlet(np.ones(3), size=2)) for _ in range(3)]
    ok = True
    min_delta, max_be = math.inf, 0.0
    for q in instances:
        cfgs = [DecodeConfig("low_confidence", 2), DecodeConfig("dynamic_low_confidence", 2, tau=0.9),
                DecodeConfig("low_confidence", 2, bias_elim=True),
                DecodeConfig("dynamic_low_confidence", 2, tau=0.9, bias_elim=True)]
        for r in inequality_chain(OracleFactorized(q), [()], cfgs):
            if r.config["bias_elim"]:
                max_be = max(max_be, abs(r.delta))
                ok &= abs(r.delta) <= 1e-10
            else:
                min_delta = min(min_delta, r.delta)
                ok &= r.H_con <= r.H_con_seq <= r.H_seq and r.delta > 0
    return bool(ok), f"min confidence delta {min_delta:.4f}, max |delta| bias-elim {max_be:.1e}"


def criterion_5():
    rng = np.random.default_rng(5)
    worst, n1, n2 = 0.0, 0, 0
    for _ in range(50):
        V, L = int(rng.integers(2, 4)), int(rng.integers(2, 4))
        q = FactorizedDist(rng.dirichlet(np.ones(V), size=L))
        dev = proof_formula_deviation(q, L, float(rng.choice([0.5, 0.9, 1.0])))
        worst = max(worst, dev["case1"], dev["case2"])
        n1 += dev["n_case1"]
        n2 += dev["n_case2"]
    return worst <= 1e-10 and n1 > 0 and n2 > 0, f"max deviation {worst:.1e} ({n1} case-1, {n2} case-2 conditionals)"


def criterion_6():
    rng = np.random.default_rng(6)
    j = random_joint(2, 3, rng)
    worst_tv = 0.0
    for code in OBJECTIVE_CODES:
        opt = objective_optimum(j, code)
        fit = TabularModel(2, 3, "bidirectional" if code.startswith("bc") else "unidirectional").fit(j, code)
        ft = fit.table()
        worst_tv = max(worst_tv, max(0.5 * float(np.abs(ft[k] - p).sum()) for k, p in opt.table().items()))
    spec = ObjectiveSpec.parse("bc+im+lm+wf")
    m = TrainableModel(3, 4, 8, 2, seed=1).initialize()
    m = m.with_params(0.5 * rng.normal(size=m.n_params))
    batch = mc_batch(random_joint(3, 4, rng).sample(16, rng), spec, TSampler(), rng)
    g = m.loss_and_grad(batch, spec)[1]
    worst_fd = 0.0
    for k in rng.choice(m.n_params, 50, replace=False):
        e = np.zeros(m.n_params)
        e[k] = 1e-4
        fd = (m.with_params(m.params_ + e).loss_and_grad(batch, spec)[0]
              - m.with_params(m.params_ - e).loss_and_grad(batch, spec)[0]) / 2e-4
        worst_fd = max(worst_fd, abs(fd - g[k]) / max(abs(fd), abs(g[k]), 1e-6))
    seq = DecodeConfig("sequential", 1)
    worst_gen = max(exact_generation_distribution(objective_optimum(j, c), (), 3, seq).total_variation(j)
                    for c in OBJECTIVE_CODES)
    ok = worst_tv <= 1e-4 and worst_fd < 1e-4 and worst_gen <= 1e-10
    return ok, f"fit TV {worst_tv:.1e}, FD rel err {worst_fd:.1e}, generation TV {worst_gen:.1e}"


def criterion_7():
    rng = np.random.default_rng(7)
    worst_div = 0.0
    for _ in range(20):
        emb = HashProjectionEmbedder(16, 2, seed=int(rng.integers(100)))
        corpus = [tuple(rng.integers(6, size=int(rng.integers(2, 9)))) for _ in range(int(rng.integers(2, 30)))]
        val, tr = diversity(corpus, emb, return_trace=True)
        worst_div = max(worst_div, abs(val - tr))
    coh = coherence([(1, 2, 0, 1, 2, 0, 1, 2)] * 5, TableEmbedder(rng.normal(size=(3, 4))), 0)
    ng = max(ngram_entropy([(3,) * 6] * 4, n) for n in (1, 2, 3))
    ar_ok = True
    for _ in range(3):
        jt = random_joint(2, 3, rng)
        m = OraclePosterior(jt)
        h, se = ar_entropy_mc(m, [()], 2000, seed=int(rng.integers(1000)))
        exact = joint_entropy(exact_generation_distribution(m, (), 3, DecodeConfig("sequential", 1)), per_token=True)
        ar_ok &= abs(h - exact) <= 3 * se
    ok = worst_div <= 1e-9 and abs(coh - 1.0) <= 1e-12 and ng == 0.0 and ar_ok
    return bool(ok), f"diversity-trace gap {worst_div:.1e}, coherence {coh:.12f}, n-gram {ng}, AR within 3se: {ar_ok}"


def _snapshot(root: Path) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if p.suffix == ".json":
                d = json.loads(data)
                if isinstance(d, dict) and isinstance(d.get("config"), dict):
                    d["config"].pop("output_dir", None)
                data = json.dumps(d, sort_keys=True).encode()
            out[str(p.relative_to(root))] = data
    return out


def criterion_8():
    tmp = Path(tempfile.mkdtemp())
    try:
        for run in ("a", "b"):
            out = tmp / run
            for argv in (["decode", "--samples-per-prompt", "8", "--strategy", "sequential,low_confidence,random"],
                         ["metrics"], ["verify", "--instances", "20"],
                         ["train", "--objective", "bc+im+lm", "--objective", "uc", "--steps", "5"]):
                if cli.main(argv + ["--output-dir", str(out), "--seed", "11"]) != 0:
                    return False, f"{argv[0]} failed"
        a, b = _snapshot(tmp / "a"), _snapshot(tmp / "b")
        diff = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
        return not diff and len(a) > 5, f"{len(a)} files compared, {len(diff)} differ"
    finally:
        shutil.rmtree(tmp)


CRITERIA = {
    1: ("theorem sweep, 200 factorized instances", criterion_1),
    2: ("hand instance joints", criterion_2),
    3: ("outcome-independent strategies unbiased", criterion_3),
    4: ("inequality chain on desk instances", criterion_4),
    5: ("case-1/case-2 proof formulas", criterion_5),
    6: ("objective optima, gradients, generation equivalence", criterion_6),
    7: ("metric identities", criterion_7),
    8: ("determinism double run", criterion_8),
}


def _line(n, name, ok, detail):
    return f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {name} ({detail})"


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n):
    name, fn = CRITERIA[n]
    ok, detail = fn()
    line = _line(n, name, ok, detail)
    RESULTS[n] = line
    print(line)
    assert ok, line


if __name__ == "__main__":
    failed = 0
    for n, (name, fn) in sorted(CRITERIA.items()):
        ok, detail = fn()
        failed += not ok
        print(_line(n, name, ok, detail), flush=True)
    raise SystemExit(1 if failed else 0)
