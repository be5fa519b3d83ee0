"""Command-line front door.

    polyvis run --config exp.yaml --seed 0 --out runs/a
    polyvis budget --config exp.yaml --prompt-len 8
    polyvis gradcheck
    polyvis mask --config exp.yaml
    polyvis sweep-order --config exp.yaml
    polyvis sweep-pe --config exp.yaml
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

from ..positional import SCHEMES
from .config import ConfigError, default_config, parse_config
from .experiment import PROMPT_TOKENS, _tsv, build_model, evaluate, mask_table, micro_gradcheck, run_experiment

log = logging.getLogger("polyvis")


def _config(args):
    if args.config:
        return parse_config(args.config, seed=args.seed, out_dir=args.out)
    if args.seed is None:
        raise ConfigError([("seed", "required (pass --seed or a --config file that sets it)")])
    extra = {"out_dir": args.out} if args.out else {}
    return default_config(args.seed, **extra)


def _out(args, cfg) -> Path:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> int:
    cfg = _config(args)
    res = run_experiment(cfg, log_every=args.log_every)
    print(json.dumps({"out_dir": str(res.out_dir), "accuracy": res.accuracy}, indent=2))
    return 0


def cmd_budget(args) -> int:
    from ..analysis import token_budget_report

    cfg = _config(args)
    rep = token_budget_report(cfg.fusion, cfg.expert_specs, cfg.pe_scheme, args.prompt_len, cfg.decoder.max_len)
    text = rep.table()
    if args.out:
        (_out(args, cfg) / "budget.tsv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    rows = []
    for method in ("mlp", "qformer"):
        for scheme in SCHEMES:
            for group, err in sorted(micro_gradcheck(method, scheme, seed=args.seed or 0).items()):
                rows.append({"fusion": method, "pe_scheme": scheme, "group": group, "max_rel_err": err})
    worst = max(r["max_rel_err"] for r in rows)
    sys.stdout.write("\t".join(rows[0]) + "\n")
    for r in rows:
        sys.stdout.write(f"{r['fusion']}\t{r['pe_scheme']}\t{r['group']}\t{r['max_rel_err']:.3e}\n")
    ok = worst <= args.tol
    print(f"worst {worst:.3e} {'<=' if ok else '>'} {args.tol:g}: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def _train(cfg):
    from ..training import run_pipeline
    from .task import generate_task

    train, evals = generate_task(cfg.task, cfg.seed)
    res = run_pipeline(cfg, train_set=train)
    return res.model, res.model.make_batch(evals)


def cmd_mask(args) -> int:
    cfg = _config(args)
    model, evals = _train(cfg)
    text = _tsv(mask_table(model, evals))
    if args.out:
        (_out(args, cfg) / "mask.tsv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_sweep_order(args) -> int:
    from ..analysis import order_sweep

    cfg = _config(args)
    orders = [list(p) for p in itertools.permutations(cfg.fusion.expert_order)]
    text = _tsv(order_sweep(cfg, orders))
    if args.out:
        (_out(args, cfg) / "order_sweep.tsv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_sweep_pe(args) -> int:
    from ..analysis import token_budget_report

    cfg = _config(args)
    rows = []
    for scheme in SCHEMES:
        c = cfg.replace(pe_scheme=scheme)
        model, evals = _train(c)
        budget = token_budget_report(c.fusion, c.expert_specs, scheme, PROMPT_TOKENS, c.decoder.max_len)
        acc = evaluate(model, evals)
        rows.append({"pe_scheme": scheme, "distinct_pe": budget.distinct_pe, **{f"acc_{k}": v for k, v in acc.items()}})
    text = _tsv(rows)
    if args.out:
        (_out(args, cfg) / "sweep_pe.tsv").write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="polyvis", description="multi-expert vision-language toy lab")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("run", parents=[common], help="train, evaluate and analyse one experiment")
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(fn=cmd_run)
    s = sub.add_parser("budget", parents=[common], help="token and PE budget report")
    s.add_argument("--prompt-len", type=int, default=PROMPT_TOKENS)
    s.set_defaults(fn=cmd_budget)
    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of micro configs")
    s.add_argument("--tol", type=float, default=1e-5)
    s.set_defaults(fn=cmd_gradcheck)
    sub.add_parser("mask", parents=[common], help="expert-masking accuracy table").set_defaults(fn=cmd_mask)
    sub.add_parser("sweep-order", parents=[common], help="one trained model per expert order").set_defaults(fn=cmd_sweep_order)
    sub.add_parser("sweep-pe", parents=[common], help="one trained model per PE scheme").set_defaults(fn=cmd_sweep_pe)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
