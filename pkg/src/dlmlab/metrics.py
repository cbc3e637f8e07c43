"""Corpus metrics: entropy (exact, AR-factorised, n-gram), coherence, diversity.

Embedding providers all return unit-norm vectors. A corpus is a list of
:class:`~dlmlab.decoding.Sample` objects or plain token sequences.
"""
from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .core import MASK, TabularJoint, entropy
from .decoding import DecodeConfig, Sample, decode_corpus

__all__ = [
    "TableEmbedder",
    "HashProjectionEmbedder",
    "ExternalEmbedder",
    "SentenceSplit",
    "split_sentences",
    "ngram_entropy",
    "coherence",
    "diversity",
    "embedding_trace_cov",
    "sequential_log_prob",
    "ar_entropy_mc",
    "cross_entropy",
    "exact_cross_entropy",
    "filter_degenerate",
    "MetricReport",
    "REFERENCE_AVERAGES",
    "write_report_csv",
]

# Averages over off-the-shelf models, echoed as annotations only.
REFERENCE_AVERAGES = {
    "note": "paper, not reproduced",
    "DLM": {"unigram": 6.793, "bigram": 10.133, "trigram": 11.456, "coherence": 0.649, "diversity": 0.597},
    "ARM": {"unigram": 7.316, "bigram": 11.086, "trigram": 12.497, "coherence": 0.604, "diversity": 0.589},
}


def _tokens(s) -> tuple:
    return tuple(s.tokens) if isinstance(s, Sample) else tuple(s)


def _unit(v: np.ndarray, what: str) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0 or not np.isfinite(n):
        raise ValueError(f"cannot normalise zero or non-finite embedding for {what}")
    return v / n


class TableEmbedder:
    """Token lookup table; a sequence embeds to its normalised mean vector."""

    def __init__(self, vectors):
        self.vectors = np.asarray(vectors, dtype=float)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be a (V, dim) array")

    @property
    def dim(self):
        return self.vectors.shape[1]

    def embed(self, tokens) -> np.ndarray:
        tokens = list(tokens)
        if not tokens:
            raise ValueError("cannot embed an empty token run")
        return _unit(self.vectors[tokens].mean(axis=0), f"tokens {tokens}")

    @classmethod
    def from_json(cls, path) -> "TableEmbedder":
        with open(path) as fh:
            d = json.load(fh)
        ids = sorted(int(k) for k in d["vectors"])
        if ids != list(range(len(ids))):
            raise ValueError("embedding table must cover token ids 0..V-1")
        vecs = np.array([d["vectors"][str(i)] for i in ids], dtype=float)
        if vecs.shape[1] != d["dim"]:
            raise ValueError(f"declared dim {d['dim']} but vectors have {vecs.shape[1]}")
        return cls(vecs)

    def to_dict(self) -> dict:
        return {"dim": self.dim, "vectors": {str(i): v.tolist() for i, v in enumerate(self.vectors)}}


class HashProjectionEmbedder:
    """Seeded Gaussian random projection of the bag of n-grams (orders 1..max_n)."""

    def __init__(self, dim: int = 64, max_n: int = 2, seed: int = 0):
        self.dim = dim
        self.max_n = max_n
        self.seed = seed
        self._cache: dict = {}

    def _vec(self, gram: tuple) -> np.ndarray:
        v = self._cache.get(gram)
        if v is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=(len(gram),) + gram)
            v = np.random.default_rng(ss).standard_normal(self.dim)
            self._cache[gram] = v
        return v

    def embed(self, tokens) -> np.ndarray:
        tokens = tuple(int(t) for t in tokens)
        if not tokens:
            raise ValueError("cannot embed an empty token run")
        acc = np.zeros(self.dim)
        for n in range(1, self.max_n + 1):
            for s in range(len(tokens) - n + 1):
                acc += self._vec(tokens[s:s + n])
        return _unit(acc, f"tokens {tokens}")


class ExternalEmbedder:
    """Precomputed sample-level vectors keyed by sample id."""

    def __init__(self, vectors: dict):
        self.vectors = {str(k): _unit(np.asarray(v, dtype=float), f"id {k}") for k, v in vectors.items()}

    @classmethod
    def from_jsonl(cls, path) -> "ExternalEmbedder":
        vecs = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                    vecs[str(d["id"])] = d["vec"]
                except (json.JSONDecodeError, KeyError) as exc:
                    raise ValueError(f"{path}:{lineno}: malformed embedding line ({exc})") from None
        return cls(vecs)

    def embed(self, tokens):
        raise TypeError("external embeddings are keyed by sample id; only sample-level metrics apply")

    def embed_sample(self, sample) -> np.ndarray:
        try:
            return self.vectors[str(sample.id)]
        except KeyError:
            raise KeyError(f"no external embedding for sample id {sample.id!r}") from None


def _embed_sample(embedder, s) -> np.ndarray:
    if hasattr(embedder, "embed_sample"):
        return embedder.embed_sample(s)
    return embedder.embed(_tokens(s))


@dataclass(frozen=True)
class SentenceSplit:
    sentences: tuple
    separator_id: int

    @property
    def K(self) -> int:
        return len(self.sentences)

    def nonempty(self) -> tuple:
        return tuple(s for s in self.sentences if s)

    def join(self) -> tuple:
        out = []
        for n, s in enumerate(self.sentences):
            if n:
                out.append(self.separator_id)
            out.extend(s)
        return tuple(out)


def split_sentences(tokens, separator_id: int) -> SentenceSplit:
    runs, cur = [], []
    for t in tokens:
        if t == separator_id:
            runs.append(tuple(cur))
            cur = []
        else:
            cur.append(t)
    runs.append(tuple(cur))
    return SentenceSplit(tuple(runs), separator_id)


def ngram_entropy(corpus, n: int) -> float:
    """Entropy (nats) of the pooled empirical n-gram distribution.

    Windows never straddle two samples.
    """
    seqs = [_tokens(s) for s in corpus]
    if not seqs:
        raise ValueError("empty corpus")
    if n < 1 or n > min(len(s) for s in seqs):
        raise ValueError(f"n={n} exceeds the shortest sequence length")
    counts = Counter()
    for s in seqs:
        counts.update(s[i:i + n] for i in range(len(s) - n + 1))
    c = np.array(sorted(counts.values()), dtype=float)
    return entropy(c / c.sum())


def coherence(corpus, embedder, separator_id: int, return_counts: bool = False):
    """Mean adjacent-sentence cosine, over samples with at least two sentences."""
    per_sample = []
    excluded = 0
    for s in corpus:
        sents = split_sentences(_tokens(s), separator_id).nonempty()
        if len(sents) < 2:
            excluded += 1
            continue
        E = np.array([embedder.embed(x) for x in sents])
        per_sample.append(float(np.mean(np.einsum("kd,kd->k", E[:-1], E[1:]))))
    if not per_sample:
        raise ValueError("coherence undefined: no sample has K >= 2 sentences")
    value = float(np.mean(per_sample))
    return (value, len(per_sample), excluded) if return_counts else value


def embedding_trace_cov(Z: np.ndarray) -> float:
    return float(np.trace(np.atleast_2d(np.cov(Z, rowvar=False, bias=True))))


def diversity(corpus, embedder, return_trace: bool = False):
    """``1 - ||mean embedding||^2``, i.e. one minus mean pairwise cosine."""
    corpus = list(corpus)
    if len(corpus) < 2:
        raise ValueError("diversity needs at least 2 samples")
    Z = np.array([_embed_sample(embedder, s) for s in corpus])
    mu = Z.mean(axis=0)
    value = float(1.0 - mu @ mu)
    return (value, embedding_trace_cov(Z)) if return_trace else value


def sequential_log_prob(model, prompt, tokens) -> float:
    """``log p_seq(x | c)`` by left-to-right factorisation with a masked suffix."""
    prompt, tokens = tuple(prompt), tuple(tokens)
    x = list(prompt) + [MASK] * len(tokens)
    total = 0.0
    for n, tok in enumerate(tokens):
        i = len(prompt) + n
        p = model.predict_proba(tuple(x), [i])[0][tok]
        if p <= 0:
            raise ValueError(f"token {tok} at position {i} has zero probability under the sequential model")
        total += math.log(p)
        x[i] = tok
    return total


def _mean_stderr(vals) -> tuple:
    vals = np.asarray(vals, dtype=float)
    if vals.size == 0:
        raise ValueError("empty sample")
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else math.inf
    return float(vals.mean()), se


def cross_entropy(corpus, seq_model) -> tuple:
    """Per-token ``-E[(1/L) log p_seq(x | c)]`` over the corpus; ``(mean, stderr)``."""
    vals = [-sequential_log_prob(seq_model, s.prompt, s.tokens) / len(s.tokens) for s in corpus]
    return _mean_stderr(vals)


def ar_entropy_mc(seq_model, prompts, n_samples: int, seed: int = 0) -> tuple:
    """Per-token entropy of sequential decoding, estimated from its own samples."""
    L_total = seq_model.seq_len
    cfg = DecodeConfig("sequential", 1, seed=seed)
    corpus = decode_corpus(seq_model, prompts, L_total, cfg, n_samples)
    return cross_entropy(corpus, seq_model)


def exact_cross_entropy(p: TabularJoint, q: TabularJoint, per_token: bool = True) -> float:
    """``-sum p log q``; raises if ``p`` puts mass where ``q`` has none."""
    if (p.V, p.L) != (q.V, q.L):
        raise ValueError("distributions over different spaces")
    support = p.probs > 0
    if np.any(q.probs[support] <= 0):
        raise ValueError("cross-entropy is infinite: p has mass outside the support of q")
    h = float(-(p.probs[support] * np.log(q.probs[support])).sum())
    return h / p.L if per_token else h


def _longest_run(seq) -> int:
    best = cur = 0
    prev = object()
    for t in seq:
        cur = cur + 1 if t == prev else 1
        prev = t
        best = max(best, cur)
    return best


def filter_degenerate(corpus, max_run_fraction: float = 0.5) -> list:
    """Drop samples whose longest single-token run exceeds the given fraction of length."""
    return [s for s in corpus if _longest_run(_tokens(s)) <= max_run_fraction * len(_tokens(s))]


@dataclass
class MetricReport:
    label: str
    n_samples: int
    ngram: dict = field(default_factory=dict)
    coherence: Optional[float] = None
    coherence_samples: int = 0
    coherence_excluded: int = 0
    diversity: Optional[float] = None
    diversity_trace_cov: Optional[float] = None
    cross_entropy: Optional[float] = None
    cross_entropy_stderr: Optional[float] = None
    entropy_exact: Optional[float] = None
    entropy_ar: Optional[float] = None
    entropy_ar_stderr: Optional[float] = None
    h_seq: Optional[float] = None
    config: dict = field(default_factory=dict)

    CSV_FIELDS = ("label", "n_samples", "unigram", "bigram", "trigram", "coherence", "coherence_samples",
                  "diversity", "diversity_trace_cov", "cross_entropy", "cross_entropy_stderr",
                  "entropy_exact", "entropy_ar", "entropy_ar_stderr", "h_seq")

    def row(self) -> dict:
        d = asdict(self)
        ng = d.pop("ngram")
        d.pop("config")
        d.update({"unigram": ng.get(1), "bigram": ng.get(2), "trigram": ng.get(3)})
        return {k: d.get(k) for k in self.CSV_FIELDS}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ngram"] = {str(k): v for k, v in self.ngram.items()}
        return d

    @classmethod
    def compute(cls, label, corpus, embedder=None, separator_id=None, seq_model=None,
                ns=(1, 2, 3), config=None) -> "MetricReport":
        corpus = list(corpus)
        rep = cls(label=label, n_samples=len(corpus), config=dict(config or {}))
        if not corpus:
            return rep
        shortest = min(len(_tokens(s)) for s in corpus)
        rep.ngram = {n: ngram_entropy(corpus, n) for n in ns if n <= shortest}
        if embedder is not None:
            if separator_id is not None and not isinstance(embedder, ExternalEmbedder):
                try:
                    rep.coherence, rep.coherence_samples, rep.coherence_excluded = coherence(
                        corpus, embedder, separator_id, return_counts=True)
                except ValueError:
                    rep.coherence_excluded = len(corpus)
            if len(corpus) >= 2:
                rep.diversity, rep.diversity_trace_cov = diversity(corpus, embedder, return_trace=True)
        if seq_model is not None and all(isinstance(s, Sample) for s in corpus):
            rep.cross_entropy, rep.cross_entropy_stderr = cross_entropy(corpus, seq_model)
        return rep


def write_report_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MetricReport.CSV_FIELDS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())
