import itertools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlmlab.core import MASK, FactorizedDist, TabularJoint, entropy, factorized_to_joint, noise, random_joint
from dlmlab.decoding import DecodeConfig, exact_generation_distribution
from dlmlab.models import OracleCausal, OraclePosterior, TabularModel, causal_predict
from dlmlab.objectives import (
    OBJECTIVE_CODES, ObjectiveSpec, TSampler, exact_expected_loss, expected_loss, loss, ntp_eval_loss,
    objective_optimum,
)


def _conditional_entropies(j):
    """H(X^i | X^<i) from entropies of prefix marginals."""
    hs = [0.0]
    for i in range(1, j.L + 1):
        pref = j.table.sum(axis=tuple(range(i, j.L))) if i < j.L else j.table
        hs.append(entropy(pref.ravel()))
    return [hs[i + 1] - hs[i] for i in range(j.L)]


def test_exactly_eight_admissible_specs():
    ok = []
    for ctx, im, lm, w in itertools.product(("uc", "bc"), (False, True), (False, True), ("constant", "inverse_t")):
        try:
            ok.append(ObjectiveSpec(ctx, im, lm, w).code)
        except ValueError:
            pass
    assert sorted(ok) == sorted(OBJECTIVE_CODES) and len(ok) == 8
    for code in OBJECTIVE_CODES:
        assert ObjectiveSpec.parse(code).code == code


@pytest.mark.parametrize("bad", ["bc", "bc+im", "bc+lm", "uc+wf", "uc+im+wf", "lm+uc", "uc+xx", ""])
def test_inadmissible_codes(bad):
    with pytest.raises(ValueError):
        ObjectiveSpec.parse(bad)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-4, 0.99), st.integers(0, 2**32 - 1))
def test_tsampler_range(t_min, seed):
    ts = TSampler(t_min).sample(np.random.default_rng(seed), size=200)
    assert np.all(ts > 0) and np.all(ts <= 1) and np.all(ts >= t_min)


def test_tsampler_validation():
    for bad in (0.0, 1.0, -0.5):
        with pytest.raises(ValueError):
            TSampler(bad)


@pytest.mark.parametrize("weighting", ["constant", "inverse_t"])
def test_pattern_weight_against_quadrature(weighting):
    s = TSampler(0.01)
    L = 4
    for m in range(L + 1):
        e = 1 if weighting == "constant" else 0
        f = lambda t: t ** (m - 1 + e) * (1 - t) ** (L - m)
        ref = mpmath.quad(f, [0.01, 1]) / (1 - mpmath.mpf("0.01"))
        assert s.pattern_weight(m, L, weighting) == pytest.approx(float(ref), rel=1e-10)


def test_uc_loss_is_sequence_nll(rng):
    j = random_joint(3, 3, rng)
    m = OracleCausal(j)
    for x0 in j.sample(20, rng):
        assert loss(m, x0, 0.5, x0, "uc") == pytest.approx(-math.log(j.prob(x0)), abs=1e-12)


def test_no_masked_positions_zero_loss(rng):
    j = random_joint(2, 3, rng)
    assert loss(OraclePosterior(j), (0, 1, 1), 0.3, (0, 1, 1), "bc+im+lm") == 0.0


def test_weighting_ratio(rng):
    j = random_joint(3, 3, rng)
    m = OraclePosterior(j)
    for _ in range(20):
        x0 = j.sample(1, rng)[0]
        t = float(rng.uniform(0.01, 1))
        x_t = noise(x0, t, rng)
        a, b = loss(m, x0, t, x_t, "uc+im+lm+wf"), loss(m, x0, t, x_t, "uc+im+lm")
        assert a == pytest.approx(b / t, rel=1e-14)


def test_label_masking_restricts_index_set(rng):
    j = random_joint(3, 4, rng)
    m = OracleCausal(j)
    for _ in range(30):
        x0 = j.sample(1, rng)[0]
        t = float(rng.uniform(0.01, 1))
        x_t = noise(x0, t, rng)
        ref = -sum(math.log(causal_predict(j, x0[:i] + (MASK,) * (4 - i), i)[x0[i]])
                   for i in range(4) if x_t[i] == MASK)
        assert loss(m, x0, t, x_t, "uc+lm") == ref


def test_bc_with_unidirectional_model_raises(rng):
    j = random_joint(2, 2, rng)
    with pytest.raises(ValueError):
        loss(OracleCausal(j), (0, 1), 0.5, (MASK, 1), "bc+im+lm")


def test_expected_loss_uc_matches_entropy(rng):
    j = random_joint(3, 3, rng)
    mean, se = expected_loss(OracleCausal(j), j, "uc", n_mc=4000, seed=1)
    assert abs(mean - sum(_conditional_entropies(j))) <= 3 * se


def test_expected_loss_empty_sample(rng):
    j = random_joint(2, 2, rng)
    with pytest.raises(ValueError, match="empty sample"):
        expected_loss(OracleCausal(j), j, "uc", n_mc=0)


def test_expected_loss_stderr_scaling(rng):
    j = random_joint(3, 3, rng)
    m = OraclePosterior(j)
    _, s1 = expected_loss(m, j, "bc+im+lm", n_mc=2000, seed=5)
    _, s2 = expected_loss(m, j, "bc+im+lm", n_mc=4000, seed=5)
    assert 0.8 <= (s2 / s1) * math.sqrt(2) <= 1.2


def test_expected_loss_agrees_with_exact(rng):
    j = random_joint(2, 3, rng)
    m = OraclePosterior(j)
    exact = exact_expected_loss(m, j, "bc+im+lm+wf")
    mean, se = expected_loss(m, j, "bc+im+lm+wf", n_mc=4000, seed=2)
    assert abs(mean - exact) <= 3.5 * se


def test_expected_loss_reproducible(rng):
    j = random_joint(2, 3, rng)
    m = OraclePosterior(j)
    assert expected_loss(m, j, "bc+im+lm", n_mc=50, seed=3) == expected_loss(m, j, "bc+im+lm", n_mc=50, seed=3)


def test_optimum_factorized_bc(rng):
    f = FactorizedDist(rng.dirichlet(np.ones(3), size=3))
    opt = objective_optimum(factorized_to_joint(f), "bc+im+lm+wf")
    for (i, ctx), p in opt.table().items():
        assert ctx[i] == MASK
        np.testing.assert_allclose(p, f.marginals[i], atol=1e-12)


def test_optimum_uc_is_causal_table(rng):
    j = random_joint(3, 3, rng)
    opt = objective_optimum(j, "uc")
    for (i, prefix), p in opt.table().items():
        np.testing.assert_allclose(p, causal_predict(j, tuple(prefix) + (MASK,) * (3 - i), i), atol=1e-12)


@pytest.mark.parametrize("code", OBJECTIVE_CODES)
def test_tabular_gd_reaches_optimum(code, rng):
    j = random_joint(2, 3, rng)
    opt = objective_optimum(j, code)
    scope = "bidirectional" if code.startswith("bc") else "unidirectional"
    fit = TabularModel(2, 3, scope).fit(j, code)
    ft = fit.table()
    assert set(ft) == set(opt.table())
    worst = max(0.5 * np.abs(ft[k] - p).sum() for k, p in opt.table().items())
    assert worst <= 1e-4


def test_all_optima_generation_equivalent(rng):
    j = random_joint(2, 3, rng)
    gens = [exact_generation_distribution(objective_optimum(j, c), (), 3, DecodeConfig("sequential", 1))
            for c in OBJECTIVE_CODES]
    for g in gens:
        assert g.total_variation(j) <= 1e-10
        assert g.total_variation(gens[0]) <= 1e-10


def test_ntp_eval_loss_oracles(rng):
    j = random_joint(3, 3, rng)
    ref = sum(_conditional_entropies(j)[1:]) / 2
    assert ntp_eval_loss(OracleCausal(j), j) == pytest.approx(ref, abs=1e-12)
    assert ntp_eval_loss(OraclePosterior(j), j) == pytest.approx(ntp_eval_loss(OracleCausal(j), j), abs=1e-12)
    uni = TabularJoint(3, 3, np.full(27, 1 / 27))
    assert ntp_eval_loss(OracleCausal(uni), uni) == pytest.approx(math.log(3), abs=1e-12)


def test_ntp_eval_loss_minimized_by_causal_oracle(rng):
    j = random_joint(3, 3, rng)
    best = ntp_eval_loss(OracleCausal(j), j)
    opt = objective_optimum(j, "uc")
    for _ in range(20):
        pert = opt.with_params(opt.params_ + 0.3 * rng.normal(size=opt.params_.size))
        assert ntp_eval_loss(pert, j) >= best - 1e-9


def test_ntp_eval_loss_corpus(rng):
    j = random_joint(2, 3, rng)
    corpus = j.sample(3000, rng)
    assert ntp_eval_loss(OracleCausal(j), corpus) == pytest.approx(ntp_eval_loss(OracleCausal(j), j), abs=0.05)
