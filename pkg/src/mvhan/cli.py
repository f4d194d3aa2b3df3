"""Command-line entry point: ``mvhan <subcommand> [flags]``.

Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import logging
import os
import sys

import numpy as np

from . import gradcheck
from .config import load_config
from .data import ParseError, SchemaError, day_threshold, generate_synthetic, load_dataset, temporal_split, write_dataset
from .evaluation import EvalReport, evaluate, read_report, rela_impr, write_report
from .model import VARIANTS, ConfigError, build_variant, canonical_variant, load_checkpoint, save_checkpoint
from .retrieval import build_index, encode_users, export_embeddings, read_index
from .training import train, write_metrics_log

log = logging.getLogger("mvhan")

ABLATION_ROWS = ("mvhan", "mvhan-wose", "mvhan-wofe", "mvhan-mlp", "ttm", "ttm-all")
DISPLAY = {"mvhan": "MV-HAN", "mvhan-wose": "MV-HAN w/o SE", "mvhan-wofe": "MV-HAN w/o FE",
           "mvhan-mlp": "MV-HAN_MLP", "ttm": "TTM", "ttm-all": "TTM_all"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p, *names):
    flags = {
        "config": dict(help="key = value config file"),
        "seed": dict(type=int, help="root seed (overrides config 'seed')"),
        "out": dict(help="output path"),
        "data": dict(help="dataset directory (schema.tsv, interactions.tsv, ...)"),
        "checkpoint": dict(help="checkpoint directory"),
        "variant": dict(help=f"model variant: {', '.join(VARIANTS)}"),
        "k": dict(type=int, help="cut-off for HR@k / number of results"),
        "baseline": dict(help="baseline report file (eval) or variant name (ablate)"),
        "epochs": dict(type=int, help="training epochs"),
        "r": dict(type=int, help="negatives per positive"),
        "temperature": dict(type=float, help="cosine logit temperature"),
    }
    for n in names:
        p.add_argument(f"--{n}", **flags[n])


def build_parser():
    parser = _Parser(prog="mvhan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    p = sub.add_parser("gen-data", help="write a synthetic multi-type dataset")
    _common(p, "config", "seed", "out")
    p = sub.add_parser("train", help="train a model variant")
    _common(p, "config", "seed", "data", "out", "variant", "epochs", "r", "temperature")
    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _common(p, "config", "seed", "data", "checkpoint", "k", "baseline", "out")
    p = sub.add_parser("export", help="export content embeddings to index files")
    _common(p, "config", "data", "checkpoint", "out")
    p.add_argument("--type", dest="ctype", help="export only this content type")
    p = sub.add_parser("retrieve", help="top-k contents for one user")
    _common(p, "config", "data", "checkpoint", "k")
    p.add_argument("--user", type=int, required=True, help="user id")
    p.add_argument("--type", dest="ctype", required=True, help="content type")
    p.add_argument("--index", help="index file (default: encode the catalog from the checkpoint)")
    p = sub.add_parser("ablate", help="train and evaluate every variant, print a comparison table")
    _common(p, "config", "seed", "data", "out", "k", "baseline", "epochs", "r", "temperature")
    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=10)
    _common(p, "seed")
    return parser


def _run_config(args):
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "variant", None):
        cfg.model.variant = canonical_variant(args.variant)
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
    if getattr(args, "r", None) is not None:
        cfg.train.r = args.r
    if getattr(args, "temperature", None) is not None:
        cfg.model.temperature = args.temperature
    if getattr(args, "k", None) is not None:
        cfg.eval.k = args.k
    return cfg.validate()


def _require(args, *names):
    missing = [f"--{n}" for n in names if not getattr(args, n, None)]
    if missing:
        raise UsageError(f"missing required flag(s): {', '.join(missing)}")


def _split(cfg, data_dir):
    ds = load_dataset(data_dir, tuple(cfg.data.types))
    return temporal_split(ds, day_threshold(ds, cfg.data.split_day))


def _train_one(cfg, train_ds):
    model = build_variant(cfg.model, train_ds.schema, cfg.seed)
    steps = train(model, train_ds, cfg.train)
    return model, steps


# -- subcommands --------------------------------------------------------------

def cmd_gen_data(args, out):
    _require(args, "out")
    cfg = _run_config(args)
    ds, _ = generate_synthetic(cfg.synth, cfg.seed)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} interactions ({', '.join(f'{t}={ds.count(t)}' for t in ds.types)}) to {args.out}", file=out)


def cmd_train(args, out):
    _require(args, "data", "out")
    cfg = _run_config(args)
    tr, _ = _split(cfg, args.data)
    model, steps = _train_one(cfg, tr)
    save_checkpoint(model, args.out, extra={"train": cfg.train.to_dict()})
    write_metrics_log(steps, os.path.join(args.out, "metrics.tsv"))
    last = steps[-1].loss if steps else float("nan")
    print(f"trained {cfg.model.variant}: {len(steps)} steps, final loss {last:.4f}; checkpoint in {args.out}", file=out)


def cmd_eval(args, out):
    _require(args, "data", "checkpoint")
    cfg = _run_config(args)
    model, _ = load_checkpoint(args.checkpoint)
    tr, te = _split(cfg, args.data)
    baseline = read_report(args.baseline) if args.baseline else None
    report = evaluate(model, tr, te, k=cfg.eval.k, seed=cfg.seed, n_auc_negatives=cfg.eval.auc_negatives,
                      name=model.config.variant)
    if baseline is not None:
        report.attach_baseline(baseline, name=baseline.name or os.path.basename(args.baseline))
    text = report.to_text()
    if args.out:
        write_report(report, args.out)
    out.write(text)


def cmd_export(args, out):
    _require(args, "data", "checkpoint", "out")
    cfg = _run_config(args)
    model, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data, tuple(cfg.data.types))
    os.makedirs(args.out, exist_ok=True)
    types = [args.ctype] if args.ctype else list(model.types)
    for t in types:
        path = os.path.join(args.out, f"index_{t}.tsv")
        index = export_embeddings(model, ds.catalogs[t], t, path)
        print(f"{t}: {len(index)} vectors of dim {index.dim} -> {path}", file=out)


def cmd_retrieve(args, out):
    _require(args, "data", "checkpoint")
    cfg = _run_config(args)
    model, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data, tuple(cfg.data.types))
    if args.index:
        index = read_index(args.index)
        if index.ctype != args.ctype:
            raise ConfigError(f"index holds type {index.ctype!r}, asked for {args.ctype!r}")
    else:
        index = build_index(model, ds.catalogs[args.ctype], args.ctype)
    try:
        row = ds.user_rows(np.array([args.user]))
    except KeyError:
        raise ConfigError(f"unknown user id {args.user}") from None
    query = encode_users(model, ds.user_features[row])[0]
    for rank, (cid, score) in enumerate(index.top_k(query, cfg.eval.k), 1):
        out.write(f"{rank}\t{cid}\t{score!r}\n")


def _mean_reports(reports, name, k):
    merged = EvalReport(k=k, name=name)
    for t in reports[0].auc:
        merged.auc[t] = float(np.mean([r.auc[t] for r in reports]))
        merged.hr[t] = float(np.mean([r.hr[t] for r in reports]))
        merged.n_users[t] = reports[0].n_users[t]
        merged.n_pairs[t] = reports[0].n_pairs[t]
    return merged


def ablation_table(reports, baseline, k):
    """Rows per variant: per-type AUC, HR@k and RelaImpr against ``baseline``."""
    types = [t for t in reports["mvhan"].auc]
    head = ["variant"] + [f"{t}.{m}" for t in types for m in ("auc", f"hr@{k}", "relaimpr_auc", f"relaimpr_hr@{k}")]
    lines = ["\t".join(head)]
    base = reports[baseline]
    for v in ABLATION_ROWS:
        rep = reports[v]
        cells = [DISPLAY[v]]
        for t in types:
            if t in rep.auc:
                cells += [f"{rep.auc[t]:.4f}", f"{rep.hr[t]:.4f}"]
                if t in base.auc:
                    cells += [f"{rela_impr(rep.auc[t], base.auc[t], 'auc'):.2f}%",
                              f"{rela_impr(rep.hr[t], base.hr[t], 'hr'):.2f}%"]
                else:
                    cells += ["-", "-"]
            else:
                cells += ["-"] * 4
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n" + f"# RelaImpr relative to {DISPLAY[baseline]}\n"


def cmd_ablate(args, out):
    _require(args, "data")
    cfg = _run_config(args)
    baseline = canonical_variant(args.baseline or cfg.ablate.baseline)
    seeds = cfg.ablate.seeds or [cfg.seed]
    tr, te = _split(cfg, args.data)
    reports = {}
    for v in ABLATION_ROWS:
        per_seed = []
        for s in seeds:
            run = copy.deepcopy(cfg)
            run.seed = s
            run.model.variant = v
            run.validate()
            model, _ = _train_one(run, tr)
            per_seed.append(evaluate(model, tr, te, k=cfg.eval.k, seed=s, n_auc_negatives=cfg.eval.auc_negatives,
                                     name=v))
            log.info("ablate %s seed %d done", v, s)
        reports[v] = _mean_reports(per_seed, v, cfg.eval.k)
    table = ablation_table(reports, baseline, cfg.eval.k)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "ablation.tsv"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(table)
        for v, rep in reports.items():
            write_report(rep, os.path.join(args.out, f"report_{v}.json"))
    out.write(table)


def cmd_grad_check(args, out):
    results = gradcheck.run_suite(instances=args.instances, seed=args.seed or 0)
    ok = True
    for name, err in results.items():
        passed = err < gradcheck.TOLERANCE
        ok &= passed
        out.write(f"{'PASS' if passed else 'FAIL'}\t{name}\tmax_rel_err={err:.3e}\n")
    if not ok:
        raise RuntimeError("gradient check failed")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "export": cmd_export,
    "retrieve": cmd_retrieve,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
}


def run(argv=None, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=err)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](args, out)
    except (UsageError, ConfigError, SchemaError) as exc:
        print(f"mvhan {args.command}: {exc}", file=err)
        return 2
    except (ParseError, OSError, KeyError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"mvhan {args.command}: error: {exc}", file=err)
        return 1
    return 0


def main():
    logging.basicConfig(level=os.environ.get("MVHAN_LOG", "WARNING"), format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
