"""Experiment configuration: defaults, data sources, model resolution."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Optional

import numpy as np

from .core import DEFAULT_CAP, FactorizedDist, TabularJoint, factorized_to_joint, load_distribution
from .decoding import CONFIDENCE_STRATEGIES, DecodeConfig, read_corpus
from .metrics import ExternalEmbedder, HashProjectionEmbedder, TableEmbedder
from .models import OracleCausal, OracleFactorized, OraclePosterior, model_from_dict
from .objectives import OBJECTIVE_CODES, objective_optimum

OUTPUT_ENV = "DLMLAB_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "output_dir": "out",
    "cap": DEFAULT_CAP,
    "data": {"kind": "synthetic", "V": 8, "L": 6, "seed": 0, "separator_id": 0, "concentration": 0.3},
    "model": {"kind": "oracle_posterior"},
    "objectives": list(OBJECTIVE_CODES),
    "train": {
        "mode": "neural", "n_steps": 300, "lr": 0.05, "momentum": 0.9, "batch_size": 64,
        "d_model": 16, "n_layers": 2, "ntp_target": None, "eval_every": 10, "n_train": 2000,
    },
    "decode": {
        "strategies": ["sequential", "low_confidence", "dynamic_low_confidence", "high_entropy", "random"],
        "block_lengths": [1, 2, 4], "tau": 0.9, "bias_elim": [False, True], "n_prompts": 8,
        "prompt_length": 2, "samples_per_prompt": 32, "keep_traces": False, "n_jobs": 1,
    },
    "metrics": {
        "ngrams": [1, 2, 3], "embedder": {"kind": "hash", "dim": 64, "max_n": 2, "seed": 0},
        "filter_degenerate": False, "max_run_fraction": 0.5,
    },
    "verify": {
        "n_instances": 200, "seed": 0, "V_max": 4, "L_max": 4, "block_lengths": [1, 2, 4],
        "taus": [0.5, 0.9, 1.0], "proof_instances": 50, "mutate": False,
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("data", "model"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path) as fh:
                cfg = _merge(cfg, json.load(fh))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if overrides:
        cfg = _merge(cfg, overrides)
    if os.environ.get(OUTPUT_ENV):
        cfg["output_dir"] = os.environ[OUTPUT_ENV]
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    for code in cfg["objectives"]:
        if code not in OBJECTIVE_CODES:
            raise ConfigError(f"unknown objective code {code!r}; valid codes: {', '.join(OBJECTIVE_CODES)}")
    dec = cfg["decode"]
    if not dec["block_lengths"]:
        raise ConfigError("decode.block_lengths must be non-empty")
    return cfg


@dataclass
class DataSource:
    V: int
    L: int
    separator_id: Optional[int]
    joint: Optional[TabularJoint]
    factorized: Optional[FactorizedDist]
    sampler: Callable
    description: dict

    def sample(self, n: int, rng) -> list:
        return self.sampler(n, rng)


def markov_joint(V: int, L: int, seed: int, separator_id: Optional[int], concentration: float,
                 cap: int = DEFAULT_CAP) -> TabularJoint:
    """First-order Markov chain with Dirichlet rows; the separator gets extra mass.

    Repeated separators are damped rather than forbidden so that every
    sequence keeps positive probability; parallel decoding can otherwise
    reach contexts an oracle cannot condition on.
    """
    if V**L > cap:
        raise ConfigError(f"synthetic chain V**L = {V**L} exceeds cap {cap}")
    rng = np.random.default_rng(seed)
    init = rng.dirichlet(np.full(V, 1.0))
    trans = rng.dirichlet(np.full(V, concentration), size=V)
    if separator_id is not None:
        trans[:, separator_id] += 0.15
        trans[separator_id, separator_id] *= 0.05
        trans /= trans.sum(axis=1, keepdims=True)
    table = init
    for _ in range(L - 1):
        table = table[..., None] * trans
    return TabularJoint(V, L, table.ravel() / table.sum())


def _corpus_sampler(seqs):
    def sample(n, rng):
        idx = rng.integers(len(seqs), size=n)
        return [seqs[i] for i in idx]
    return sample


def _joint_sampler(joint):
    return lambda n, rng: joint.sample(n, rng)


def load_data(cfg: dict) -> DataSource:
    d = cfg["data"]
    kind = d.get("kind")
    cap = cfg.get("cap", DEFAULT_CAP)
    sep = d.get("separator_id")
    try:
        if kind == "synthetic":
            joint = markov_joint(d["V"], d["L"], d.get("seed", 0), sep, d.get("concentration", 0.3), cap)
            return DataSource(joint.V, joint.L, sep, joint, None, _joint_sampler(joint), d)
        if kind == "factorized":
            f = FactorizedDist(d["marginals"])
            joint = factorized_to_joint(f, cap)
            return DataSource(f.V, f.L, sep, joint, f, _joint_sampler(joint), d)
        if kind == "random_factorized":
            f = FactorizedDist(np.random.default_rng(d.get("seed", 0)).dirichlet(np.ones(d["V"]), size=d["L"]))
            joint = factorized_to_joint(f, cap)
            return DataSource(f.V, f.L, sep, joint, f, _joint_sampler(joint), d)
        if kind in ("joint_file", "factorized_file"):
            dist = load_distribution(d["path"])
            if isinstance(dist, FactorizedDist):
                joint = factorized_to_joint(dist, cap)
                return DataSource(dist.V, dist.L, sep, joint, dist, _joint_sampler(joint), d)
            return DataSource(dist.V, dist.L, sep, dist, None, _joint_sampler(dist), d)
        if kind == "corpus":
            seqs, V, _ = ingest_corpus(d["path"], d.get("mode", "token_ids"))
            V = d.get("V", V)
            lengths = {len(s) for s in seqs}
            if len(lengths) != 1:
                raise ConfigError(f"corpus sequences must share one length, found {sorted(lengths)}")
            return DataSource(V, lengths.pop(), sep, None, None, _corpus_sampler(seqs), d)
    except FileNotFoundError as exc:
        raise ConfigError(f"data file not found: {exc.filename}") from None
    except KeyError as exc:
        raise ConfigError(f"data section is missing key {exc}") from None
    raise ConfigError(f"unknown data kind {kind!r}")


def resolve_model(cfg: dict, data: DataSource, model_cfg: Optional[dict] = None):
    m = model_cfg or cfg["model"]
    kind = m.get("kind")
    if kind == "checkpoint":
        path = m["path"]
        if not Path(path).exists():
            raise ConfigError(f"checkpoint {path} does not exist")
        with open(path) as fh:
            return model_from_dict(json.load(fh))
    if kind == "oracle_factorized":
        if data.factorized is None:
            raise ConfigError("oracle_factorized needs factorized data")
        return OracleFactorized(data.factorized)
    if kind in ("oracle_posterior", "oracle_causal", "optimum") and data.joint is None:
        raise ConfigError(f"model kind {kind!r} needs an enumerable data joint")
    if kind == "oracle_posterior":
        return OraclePosterior(data.joint)
    if kind == "oracle_causal":
        return OracleCausal(data.joint)
    if kind == "optimum":
        return objective_optimum(data.joint, m.get("objective", "bc+im+lm+wf"), cap=cfg.get("cap", DEFAULT_CAP))
    raise ConfigError(f"unknown model kind {kind!r}")


def make_embedder(cfg: dict, data: DataSource):
    e = cfg["metrics"]["embedder"]
    kind = e.get("kind")
    if kind == "hash":
        return HashProjectionEmbedder(e.get("dim", 64), e.get("max_n", 2), e.get("seed", 0))
    if kind == "table":
        return TableEmbedder.from_json(e["path"])
    if kind == "external":
        return ExternalEmbedder.from_jsonl(e["path"])
    if kind is None:
        return None
    raise ConfigError(f"unknown embedder kind {kind!r}")


def make_prompts(cfg: dict, data: DataSource) -> list:
    dec = cfg["decode"]
    k = dec["prompt_length"]
    if k < 0 or k >= data.L:
        raise ConfigError(f"prompt_length {k} must lie in [0, {data.L})")
    gen = data.L - k
    for B in sorted({c.block_length for c in decode_grid(cfg)}):
        if gen % B:
            raise ConfigError(f"generated length {gen} is not divisible by block length {B}")
    if k == 0:
        return [()]
    rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"], spawn_key=(7,)))
    return [tuple(x[:k]) for x in data.sample(dec["n_prompts"], rng)]


def decode_grid(cfg: dict) -> list:
    """Strategy x block-length cells; bias elimination only for confidence strategies."""
    dec = cfg["decode"]
    cells = []
    for strategy in dec["strategies"]:
        if strategy == "sequential":
            cells.append(DecodeConfig("sequential", 1, seed=cfg["seed"]))
            continue
        for B in dec["block_lengths"]:
            flags = dec["bias_elim"] if strategy in CONFIDENCE_STRATEGIES else [False]
            for be in flags:
                cells.append(DecodeConfig(strategy, B, dec.get("steps"), dec["tau"], be, cfg["seed"]))
    return cells


class IngestedCorpus(NamedTuple):
    sequences: list
    vocab_size: int
    vocab: Optional[dict]


def ingest_corpus(path, mode: str = "token_ids"):
    """Read a corpus file into token-id sequences.

    ``token_ids``: one sequence per line, whitespace-separated ids, or JSON
    lines with a ``tokens`` field. ``text``: whitespace tokens mapped to ids
    in order of first appearance.
    """
    if mode not in ("token_ids", "text"):
        raise ValueError(f"unknown ingest mode {mode!r}")
    seqs = []
    vocab: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if mode == "text":
                seqs.append(tuple(vocab.setdefault(w, len(vocab)) for w in line.split()))
                continue
            try:
                if line.startswith("{"):
                    seq = tuple(int(t) for t in json.loads(line)["tokens"])
                else:
                    seq = tuple(int(t) for t in line.split())
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed line ({exc})") from None
            if any(t < 0 for t in seq):
                raise ValueError(f"{path}:{lineno}: negative token id")
            seqs.append(seq)
    if not seqs:
        raise ValueError("empty corpus")
    if mode == "text":
        return IngestedCorpus(seqs, len(vocab), vocab)
    return IngestedCorpus(seqs, max(max(s) for s in seqs if s) + 1, None)


def export_token_ids(path, seqs) -> None:
    with open(path, "w") as fh:
        for s in seqs:
            fh.write(" ".join(str(t) for t in s) + "\n")
