"""Command-line driver: ``dlmlab {train,decode,metrics,verify,ingest}``.

Exit codes: 0 success, 2 configuration error, 3 verification failure,
4 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import theory
from .core import FactorizedDist, factorized_to_joint
from .decoding import DecodeConfig, decode_corpus, keep_least_confident, read_corpus, write_corpus
from .experiment import (
    ConfigError,
    decode_grid,
    export_token_ids,
    ingest_corpus,
    load_data,
    make_embedder,
    make_prompts,
    resolve_config,
    resolve_model,
)
from .metrics import REFERENCE_AVERAGES, MetricReport, ar_entropy_mc, filter_degenerate, write_report_csv
from .models import OracleFactorized, TabularModel, TrainableModel, model_to_dict
from .objectives import ObjectiveSpec, TSampler, ntp_eval_loss, objective_optimum

log = logging.getLogger("dlmlab")

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_RUNTIME = 0, 2, 3, 4
EXACT_EVAL_LIMIT = 4096


class VerificationFailed(RuntimeError):
    pass


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out(cfg, sub: str) -> Path:
    p = Path(cfg["output_dir"]) / sub
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- train --------------------------------------------------------------------

def cmd_train(cfg: dict) -> dict:
    data = load_data(cfg)
    tr = cfg["train"]
    out = _out(cfg, "train")
    rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"], spawn_key=(11,)))
    if data.joint is not None and data.V**data.L <= EXACT_EVAL_LIMIT:
        eval_set = data.joint
    else:
        eval_set = data.sample(200, rng)
    report = {"config": cfg, "objectives": {}}
    curves = []
    for code in cfg["objectives"]:
        spec = ObjectiveSpec.parse(code)
        scope = "bidirectional" if spec.context == "bc" else "unidirectional"
        if tr["mode"] == "tabular":
            if data.joint is None:
                raise ConfigError("tabular training needs an enumerable data joint")
            model = TabularModel(data.V, data.L, scope).fit(data.joint, code, max_steps=tr.get("max_steps", 50000))
            opt = objective_optimum(data.joint, code)
            fitted = model.table()
            tv = max(0.5 * float(np.abs(fitted[k] - p).sum()) for k, p in opt.table().items())
            report["objectives"][code] = {"steps": model.n_steps_, "max_cell_tv_to_optimum": tv}
        elif tr["mode"] == "neural":
            model = TrainableModel(data.V, data.L, tr["d_model"], tr["n_layers"], scope, seed=cfg["seed"])
            X = data.sample(tr["n_train"], rng)

            def record(step, loss, code=code):
                curves.append({"objective": code, "step": step, "metric": "train_loss", "value": loss})

            model.fit(X, code, n_steps=tr["n_steps"], lr=tr["lr"], momentum=tr["momentum"],
                      batch_size=tr["batch_size"], eval_set=eval_set, ntp_target=tr["ntp_target"],
                      eval_every=tr["eval_every"], callback=record)
            for h in getattr(model, "history_", []):
                curves.append({"objective": code, "step": h["step"], "metric": "ntp_loss", "value": h["ntp_loss"]})
            ntp = ntp_eval_loss(model, eval_set)
            report["objectives"][code] = {"steps": model.n_steps_, "ntp_loss": ntp}
        else:
            raise ConfigError(f"unknown train mode {tr['mode']!r}")
        _dump(out / f"{code}.json", model_to_dict(model))
        log.info("trained %s: %s", code, report["objectives"][code])
    with open(out / "loss_curves.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["objective", "step", "metric", "value"])
        w.writeheader()
        w.writerows(curves)
    _dump(out / "train_report.json", report)
    return report


# -- decode -------------------------------------------------------------------

def cmd_decode(cfg: dict) -> dict:
    data = load_data(cfg)
    model = resolve_model(cfg, data)
    prompts = make_prompts(cfg, data)
    dec = cfg["decode"]
    out = _out(cfg, "decode")
    cells = []
    for dcfg in decode_grid(cfg):
        corpus = decode_corpus(model, prompts, data.L, dcfg, dec["samples_per_prompt"],
                               keep_traces=dec["keep_traces"], n_jobs=dec["n_jobs"])
        fname = f"{dcfg.label}.jsonl"
        write_corpus(out / fname, corpus, with_traces=dec["keep_traces"])
        meta = {"label": dcfg.label, "file": fname, "decode_config": dcfg.to_dict(), "n_samples": len(corpus)}
        if dcfg.strategy == "dynamic_low_confidence":
            meta["tau"] = dcfg.tau
        cells.append(meta)
        log.info("decoded %s (%d samples)", dcfg.label, len(corpus))
    manifest = {"config": cfg, "prompts": [list(p) for p in prompts], "cells": cells}
    _dump(out / "manifest.json", manifest)
    return manifest


# -- metrics ------------------------------------------------------------------

def cmd_metrics(cfg: dict) -> dict:
    dec_dir = Path(cfg["output_dir"]) / "decode"
    man_path = dec_dir / "manifest.json"
    if not man_path.exists():
        raise ConfigError(f"no decode manifest at {man_path}; run `dlmlab decode` first")
    with open(man_path) as fh:
        manifest = json.load(fh)
    # corpora were produced under the decode-time config; only the metric settings come from this run
    cfg = {**manifest["config"], "metrics": cfg["metrics"], "output_dir": cfg["output_dir"]}
    data = load_data(cfg)
    model = resolve_model(cfg, data)
    embedder = make_embedder(cfg, data)
    met = cfg["metrics"]
    prompts = [tuple(p) for p in manifest["prompts"]]
    reports = []
    h_seq = None
    for cell in manifest["cells"]:
        corpus = read_corpus(dec_dir / cell["file"])
        if met["filter_degenerate"]:
            corpus = filter_degenerate(corpus, met["max_run_fraction"])
        rep = MetricReport.compute(cell["label"], corpus, embedder, data.separator_id, model,
                                   tuple(met["ngrams"]), config=cell["decode_config"])
        if cell["decode_config"]["strategy"] == "sequential":
            n = max(1, cell["n_samples"] // max(1, len(prompts)))
            rep.entropy_ar, rep.entropy_ar_stderr = ar_entropy_mc(model, prompts, n, seed=cfg["seed"] + 1)
            h_seq = rep.entropy_ar
        reports.append(rep)
    for rep in reports:
        rep.h_seq = h_seq
    out = _out(cfg, "metrics")
    write_report_csv(out / "metrics.csv", reports)
    with open(out / "plot_data.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "strategy", "block_length", "bias_elim", "metric", "value"])
        for rep in reports:
            dc = rep.config
            for k, v in rep.row().items():
                if k in ("label", "n_samples") or v is None:
                    continue
                w.writerow([rep.label, dc.get("strategy"), dc.get("block_length"), dc.get("bias_elim"), k, v])
    result = {"config": cfg, "reports": [r.to_dict() for r in reports], "reference_averages": REFERENCE_AVERAGES}
    _dump(out / "metrics.json", result)
    return result


# -- verify -------------------------------------------------------------------

def _chain_instances(data, seed):
    if data.factorized is not None:
        return [data.factorized]
    rng = np.random.default_rng(seed)
    insts = [FactorizedDist([[0.9, 0.1], [0.6, 0.4]])]
    insts += [FactorizedDist(rng.dirichlet(np.ones(3), size=2)) for _ in range(3)]
    return insts


def cmd_verify(cfg: dict) -> dict:
    v = cfg["verify"]
    selector = keep_least_confident if v["mutate"] else None
    sweep = theory.theorem_sweep(v["n_instances"], v["seed"], v["V_max"], v["L_max"], tuple(v["block_lengths"]),
                                 tuple(v["taus"]), cap=cfg["cap"], selector=selector)
    rng = np.random.default_rng(np.random.SeedSequence(v["seed"], spawn_key=(5,)))
    worst = 0.0
    for _ in range(v["proof_instances"]):
        V, L = int(rng.integers(2, 4)), int(rng.integers(1, 4))
        q = FactorizedDist(rng.dirichlet(np.ones(V), size=L))
        tau = float(rng.choice(v["taus"]))
        dev = theory.proof_formula_deviation(q, L, tau, cap=cfg["cap"])
        worst = max(worst, dev["case1"], dev["case2"])
    try:
        data = load_data(cfg)
        instances = _chain_instances(data, v["seed"])
    except ConfigError:
        instances = _chain_instances(type("D", (), {"factorized": None})(), v["seed"])
    chain = []
    for q in instances:
        model = OracleFactorized(q)
        B = q.L
        strategies = [DecodeConfig("sequential", 1)]
        for s in ("low_confidence", "dynamic_low_confidence"):
            strategies += [DecodeConfig(s, B, tau=max(v["taus"]) if s == "low_confidence" else 0.9),
                           DecodeConfig(s, B, tau=0.9, bias_elim=True)]
        strategies += [DecodeConfig("high_entropy", B), DecodeConfig("random", B)]
        for r in theory.inequality_chain(model, [()], strategies, exact=True, cap=cfg["cap"]):
            d = r.to_dict()
            d["q"] = q.marginals.tolist()
            chain.append(d)
    gibbs_fail = sum(1 for r in chain if r["gibbs_holds"] is False)
    report = {
        "config": cfg, "instances": sweep["instances"], "violations": sweep["violations"],
        "sweep": sweep["config"],
        "proof_formulas": {"instances": v["proof_instances"], "max_deviation": worst},
        "chain": chain, "gibbs_violations": gibbs_fail,
    }
    _dump(_out(cfg, "verify") / "verify_report.json", report)
    failed = sweep["violations"] > 0 or worst > 1e-10 or gibbs_fail > 0
    log.info("theorem violations=%d, proof deviation=%.3g, gibbs violations=%d",
             sweep["violations"], worst, gibbs_fail)
    if failed:
        raise VerificationFailed(f"{sweep['violations']} theorem violations, proof deviation {worst:.3g}, "
                                 f"{gibbs_fail} Gibbs violations")
    return report


# -- ingest -------------------------------------------------------------------

def cmd_ingest(path: str, mode: str, out: str) -> dict:
    corpus = ingest_corpus(path, mode)
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    export_token_ids(out_path, corpus.sequences)
    info = {"source": path, "mode": mode, "n_sequences": len(corpus.sequences), "vocab_size": corpus.vocab_size,
            "output": str(out_path)}
    if corpus.vocab is not None:
        _dump(out_path.with_suffix(".vocab.json"), corpus.vocab)
    return info


# -- argument parsing ---------------------------------------------------------

def _csv_list(s, typ=str):
    return [typ(x) for x in s.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--output-dir", help="output directory (env DLMLAB_OUTPUT_DIR wins)")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dlmlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train one model per objective")
    t.add_argument("--objective", action="append", help="objective code, e.g. uc+im+lm+wf (repeatable)")
    t.add_argument("--steps", type=int, help="training steps per objective")
    t.add_argument("--mode", choices=["neural", "tabular"])
    t.add_argument("--ntp-target", type=float)

    d = sub.add_parser("decode", parents=[common], help="generate corpora over the strategy grid")
    d.add_argument("--strategy", action="append", help="strategy name or comma list (repeatable)")
    d.add_argument("--block-length", action="append", help="block length or comma list (repeatable)")
    d.add_argument("--steps", type=int, help="denoising steps per block (default: block length)")
    d.add_argument("--tau", type=float)
    be = d.add_mutually_exclusive_group()
    be.add_argument("--bias-elim", dest="bias_elim", action="store_const", const=[True])
    be.add_argument("--no-bias-elim", dest="bias_elim", action="store_const", const=[False])
    d.add_argument("--decode-config", help="JSON file with one decode config (same keys as the flags)")
    d.add_argument("--samples-per-prompt", type=int)
    d.add_argument("--model-checkpoint", help="decode with a trained checkpoint")

    sub.add_parser("metrics", parents=[common], help="compute metric tables from decoded corpora")

    vp = sub.add_parser("verify", parents=[common], help="theorem sweep and inequality chain")
    vp.add_argument("--instances", type=int)
    vp.add_argument("--mutate", action="store_true", help="invert confidence selection (must fail)")

    i = sub.add_parser("ingest", parents=[common], help="convert a corpus file to token ids")
    i.add_argument("path")
    i.add_argument("--mode", choices=["token_ids", "text"], default="token_ids")
    i.add_argument("--out", required=True)
    return p


def _overrides(args) -> dict:
    o: dict = {}
    if args.output_dir:
        o["output_dir"] = args.output_dir
    if args.seed is not None:
        o["seed"] = args.seed
    if args.command == "train":
        t = {}
        if args.objective:
            o["objectives"] = args.objective
        if args.steps is not None:
            t["n_steps"] = args.steps
        if args.mode:
            t["mode"] = args.mode
        if args.ntp_target is not None:
            t["ntp_target"] = args.ntp_target
        if t:
            o["train"] = t
    elif args.command == "decode":
        dec = {}
        if args.decode_config:
            with open(args.decode_config) as fh:
                one = DecodeConfig.from_dict(json.load(fh))
            dec.update({"strategies": [one.strategy], "block_lengths": [one.block_length], "steps": one.steps,
                        "tau": one.tau, "bias_elim": [one.bias_elim]})
            o["seed"] = one.seed
        if args.strategy:
            dec["strategies"] = [s for a in args.strategy for s in _csv_list(a)]
        if args.block_length:
            dec["block_lengths"] = [b for a in args.block_length for b in _csv_list(a, int)]
        if args.steps is not None:
            dec["steps"] = args.steps
        if args.tau is not None:
            dec["tau"] = args.tau
        if args.bias_elim is not None:
            dec["bias_elim"] = args.bias_elim
        if args.samples_per_prompt is not None:
            dec["samples_per_prompt"] = args.samples_per_prompt
        if dec:
            o["decode"] = dec
        if args.model_checkpoint:
            o["model"] = {"kind": "checkpoint", "path": args.model_checkpoint}
    elif args.command == "verify":
        vv = {}
        if args.instances is not None:
            vv["n_instances"] = args.instances
        if args.mutate:
            vv["mutate"] = True
        if vv:
            o["verify"] = vv
    return o


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "ingest":
            print(json.dumps(cmd_ingest(args.path, args.mode, args.out)))
            return EXIT_OK
        cfg = resolve_config(args.config, _overrides(args))
        handler = {"train": cmd_train, "decode": cmd_decode, "metrics": cmd_metrics, "verify": cmd_verify}
        handler[args.command](cfg)
        print(f"{args.command}: wrote results under {cfg['output_dir']}")
        return EXIT_OK
    except VerificationFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        if args.command == "ingest":
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
