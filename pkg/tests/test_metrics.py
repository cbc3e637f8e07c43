import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlmlab.core import FactorizedDist, entropy, factorized_to_joint, joint_entropy, random_joint
from dlmlab.decoding import DecodeConfig, Sample, decode_corpus, exact_generation_distribution
from dlmlab.metrics import (
    REFERENCE_AVERAGES, ExternalEmbedder, HashProjectionEmbedder, MetricReport, TableEmbedder, ar_entropy_mc,
    coherence, cross_entropy, diversity, embedding_trace_cov, exact_cross_entropy, filter_degenerate,
    ngram_entropy, sequential_log_prob, split_sentences, write_report_csv,
)
from dlmlab.models import OracleFactorized, OraclePosterior

corpora = st.lists(st.lists(st.integers(0, 4), min_size=3, max_size=10), min_size=2, max_size=20)


def _naive_coherence(corpus, emb, sep):
    vals = []
    for s in corpus:
        sents, cur = [], []
        for t in list(s) + [sep]:
            if t == sep:
                if cur:
                    sents.append(cur)
                cur = []
            else:
                cur.append(t)
        if len(sents) < 2:
            continue
        cos = []
        for a in range(len(sents) - 1):
            u, v = emb.embed(sents[a]), emb.embed(sents[a + 1])
            cos.append(sum(u[d] * v[d] for d in range(len(u))))
        vals.append(sum(cos) / len(cos))
    return sum(vals) / len(vals)


def test_embedders_unit_norm_and_deterministic(rng):
    tab = TableEmbedder(rng.normal(size=(5, 7)))
    h1, h2 = HashProjectionEmbedder(16, 2, seed=3), HashProjectionEmbedder(16, 2, seed=3)
    for _ in range(50):
        x = tuple(rng.integers(5, size=int(rng.integers(1, 8))))
        for e in (tab, h1):
            assert abs(np.linalg.norm(e.embed(x)) - 1) <= 1e-9
        assert np.array_equal(h1.embed(x), h2.embed(x))
    with pytest.raises(ValueError):
        h1.embed(())


def test_table_embedder_json(tmp_path, rng):
    tab = TableEmbedder(rng.normal(size=(3, 4)))
    p = tmp_path / "emb.json"
    p.write_text(json.dumps(tab.to_dict()))
    back = TableEmbedder.from_json(p)
    assert np.array_equal(back.vectors, tab.vectors)
    p.write_text(json.dumps({"dim": 5, "vectors": tab.to_dict()["vectors"]}))
    with pytest.raises(ValueError):
        TableEmbedder.from_json(p)


def test_sentence_split():
    s = split_sentences((1, 2, 0, 3, 0, 0, 4), 0)
    assert s.sentences == ((1, 2), (3,), (), (4,)) and s.K == 4
    assert s.join() == (1, 2, 0, 3, 0, 0, 4)
    assert split_sentences((), 0).K == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 3), max_size=15))
def test_sentence_split_round_trip(tokens):
    s = split_sentences(tokens, 0)
    assert s.join() == tuple(tokens) and s.K >= 1


def test_ngram_entropy_examples():
    assert ngram_entropy([(2, 2, 2, 2)] * 5, 1) == 0.0
    assert ngram_entropy([(2, 2, 2, 2)] * 5, 3) == 0.0
    assert ngram_entropy([(0, 0, 0, 1)], 1) == pytest.approx(-(0.75 * math.log(0.75) + 0.25 * math.log(0.25)))
    with pytest.raises(ValueError):
        ngram_entropy([], 1)
    with pytest.raises(ValueError):
        ngram_entropy([(1, 2), (1,)], 2)


def test_ngram_windows_do_not_cross_samples():
    assert ngram_entropy([(0, 1), (1, 0)], 2) == pytest.approx(math.log(2))


def test_unigram_entropy_consistency(rng):
    q = np.array([0.5, 0.3, 0.15, 0.05])
    corpus = rng.choice(4, size=(10000, 100), p=q)
    assert abs(ngram_entropy([tuple(r) for r in corpus], 1) - entropy(q)) <= 0.01


@settings(max_examples=40, deadline=None)
@given(corpora, st.randoms())
def test_ngram_entropy_bounds_and_permutation(corpus, r):
    shuffled = list(corpus)
    r.shuffle(shuffled)
    for n in (1, 2, 3):
        h = ngram_entropy(corpus, n)
        assert -1e-12 <= h <= n * math.log(5) + 1e-12
        assert ngram_entropy(shuffled, n) == h


def test_coherence_identical_and_orthogonal():
    emb = TableEmbedder(np.eye(3))
    assert coherence([(1, 1, 0, 1, 1, 0, 1)] * 3, emb, 0) == pytest.approx(1.0, abs=1e-12)
    assert coherence([(1, 0, 2, 0, 1, 0, 2)], emb, 0) == pytest.approx(0.0, abs=1e-12)


def test_coherence_undefined_and_counts():
    emb = TableEmbedder(np.eye(3))
    with pytest.raises(ValueError, match="coherence undefined"):
        coherence([(1, 2, 1), (2, 2)], emb, 0)
    val, used, excluded = coherence([(1, 2), (1, 0, 1), (0, 2, 0)], emb, 0, return_counts=True)
    assert (used, excluded) == (1, 2) and val == pytest.approx(1.0)


def test_coherence_matches_naive(rng):
    emb = HashProjectionEmbedder(12, 2, seed=1)
    corpus = [tuple(rng.integers(4, size=12)) for _ in range(40)]
    assert coherence(corpus, emb, 0) == pytest.approx(_naive_coherence(corpus, emb, 0), abs=1e-12)


def test_diversity_examples(rng):
    d = 5
    emb = TableEmbedder(np.eye(d))
    assert diversity([(1,)] * 4, emb) == pytest.approx(0.0, abs=1e-15)
    assert diversity([(i,) for i in range(d)], emb) == pytest.approx(1 - 1 / d, abs=1e-15)
    with pytest.raises(ValueError):
        diversity([(1,)], emb)


def test_diversity_pairwise_oracle(rng):
    emb = HashProjectionEmbedder(8, 2, seed=2)
    corpus = [tuple(rng.integers(5, size=6)) for _ in range(30)]
    Z = np.array([emb.embed(s) for s in corpus])
    pair = np.mean([Z[a] @ Z[b] for a in range(len(Z)) for b in range(len(Z))])
    assert diversity(corpus, emb) == pytest.approx(1 - pair, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(corpora, st.integers(0, 1000))
def test_diversity_equals_trace_cov(corpus, seed):
    emb = HashProjectionEmbedder(8, 2, seed=seed)
    val, tr = diversity(corpus, emb, return_trace=True)
    assert abs(val - tr) <= 1e-9
    Z = np.array([emb.embed(s) for s in corpus])
    assert abs(val - embedding_trace_cov(Z)) <= 1e-9
    assert -1e-12 <= val <= 2
    c = coherence([tuple(s) + (0,) + tuple(s) for s in corpus], emb, 0) if any(
        any(t != 0 for t in s) for s in corpus) else None
    if c is not None:
        assert -1 - 1e-12 <= c <= 1 + 1e-12


def test_external_embedder(tmp_path, rng):
    p = tmp_path / "ext.jsonl"
    samples = [Sample((), (1, 2), id=f"0-{k}") for k in range(4)]
    p.write_text("\n".join(json.dumps({"id": s.id, "vec": rng.normal(size=3).tolist()}) for s in samples))
    ext = ExternalEmbedder.from_jsonl(p)
    val, tr = diversity(samples, ext, return_trace=True)
    assert abs(val - tr) <= 1e-9
    with pytest.raises(TypeError):
        ext.embed((1, 2))
    with pytest.raises(KeyError):
        diversity([Sample((), (1,), id="missing"), samples[0]], ext)


def test_ar_entropy_examples():
    det = OracleFactorized(FactorizedDist([[0, 1, 0], [1, 0, 0]]))
    h, se = ar_entropy_mc(det, [()], 50)
    assert h == 0.0 and se == 0.0
    uni = OracleFactorized(FactorizedDist(np.full((3, 2), 0.5)))
    h, se = ar_entropy_mc(uni, [()], 200, seed=1)
    assert abs(h - math.log(2)) <= max(3 * se, 1e-12)


def test_ar_entropy_matches_exact(rng):
    j = random_joint(3, 3, rng)
    m = OraclePosterior(j)
    h, se = ar_entropy_mc(m, [()], 3000, seed=2)
    gen = exact_generation_distribution(m, (), 3, DecodeConfig("sequential", 1))
    assert abs(h - joint_entropy(gen, per_token=True)) <= 3 * se


def test_ar_entropy_with_prompts(rng):
    j = random_joint(2, 4, rng)
    m = OraclePosterior(j)
    prompts = [(0,), (1,)]
    h, se = ar_entropy_mc(m, prompts, 3000, seed=4)
    exact = np.mean([joint_entropy(exact_generation_distribution(m, c, 4, DecodeConfig("sequential", 1)),
                                   per_token=True) for c in prompts])
    assert abs(h - exact) <= 3 * se


def test_cross_entropy_self(rng):
    j = random_joint(3, 3, rng)
    m = OraclePosterior(j)
    corpus = decode_corpus(m, [()], 3, DecodeConfig("sequential", 1, seed=7), 3000)
    ce, se_ce = cross_entropy(corpus, m)
    h, se_h = ar_entropy_mc(m, [()], 3000, seed=8)
    assert abs(ce - h) <= 3 * math.hypot(se_ce, se_h)


def test_cross_entropy_low_confidence_hand_instance(hand_q):
    m = OracleFactorized(hand_q)
    cfg = DecodeConfig("low_confidence", 2, seed=3)
    p_lcr = exact_generation_distribution(m, (), 2, cfg)
    data = factorized_to_joint(hand_q)
    ref = sum(p * -0.5 * math.log(data.prob(x)) for x, p in p_lcr.items())
    assert exact_cross_entropy(p_lcr, data) == pytest.approx(ref, abs=1e-14)
    ce, se = cross_entropy(decode_corpus(m, [()], 2, cfg, 20000), m)
    assert abs(ce - ref) <= 3 * se
    assert joint_entropy(p_lcr, per_token=True) <= exact_cross_entropy(p_lcr, data) + 1e-15


def test_gibbs_on_random_instances(rng):
    for _ in range(20):
        f = FactorizedDist(rng.dirichlet(np.ones(3), size=2))
        m = OracleFactorized(f)
        for s in ("low_confidence", "dynamic_low_confidence", "high_entropy", "random"):
            p = exact_generation_distribution(m, (), 2, DecodeConfig(s, 2, tau=0.5))
            seq = exact_generation_distribution(m, (), 2, DecodeConfig("sequential", 1))
            assert joint_entropy(p, per_token=True) <= exact_cross_entropy(p, seq) + 1e-12


def test_zero_probability_names_position():
    m = OracleFactorized(FactorizedDist([[1, 0], [0.5, 0.5]]))
    with pytest.raises(ValueError, match="position 0"):
        sequential_log_prob(m, (), (1, 0))
    with pytest.raises(ValueError):
        exact_cross_entropy(factorized_to_joint(FactorizedDist([[0.5, 0.5]])),
                            factorized_to_joint(FactorizedDist([[1, 0]])))


def test_filter_degenerate():
    corpus = [(1, 1, 1, 2), (1, 2, 1, 2), (3, 3, 1, 2)]
    assert filter_degenerate(corpus) == [(1, 2, 1, 2), (3, 3, 1, 2)]
    assert filter_degenerate(corpus, 0.75) == corpus


def test_metric_report(tmp_path, hand_q):
    m = OracleFactorized(hand_q)
    corpus = decode_corpus(m, [()], 2, DecodeConfig("random", 2), 40)
    rep = MetricReport.compute("random_B2", corpus, HashProjectionEmbedder(8), separator_id=0, seq_model=m,
                               config={"tau": 0.9})
    assert rep.cross_entropy is not None and rep.cross_entropy_stderr is not None
    assert set(rep.ngram) == {1, 2}
    assert rep.config == {"tau": 0.9}
    path = tmp_path / "r.csv"
    write_report_csv(path, [rep])
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == list(MetricReport.CSV_FIELDS) and len(lines) == 2
    json.dumps(rep.to_dict())
    assert REFERENCE_AVERAGES["DLM"]["trigram"] == 11.456 and REFERENCE_AVERAGES["ARM"]["trigram"] == 12.497
