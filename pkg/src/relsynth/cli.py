"""Command-line front end: synthesize, evaluate, demo-ci, gen-toy."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import (BudgetOverdraw, CapExceeded, ConfigError, DomainError, IncompleteRow, IntegrityError,
                     SchemaError)
from .evaluation import PlantedSpec, evaluate, gen_planted_db
from .orchestrator import synthesize_database
from .privacy import PrivacyParams, ci_width_demo
from .relational import load_database, load_schema, schema_to_json, write_database
from .synthesis import SynthesisConfig

log = logging.getLogger("relsynth")

EXIT_CONFIG, EXIT_DATA, EXIT_BUDGET = 2, 3, 4
THREADS_ENV = "RELSYNTH_THREADS"
CONFIG_KEYS = {f.name for f in dataclasses.fields(SynthesisConfig)}


def _pairs(items: list[str] | None, what: str) -> dict[str, float]:
    out = {}
    for item in items or []:
        key, sep, val = item.rpartition("=")
        if not sep or not key:
            raise ConfigError(f"{what} must look like NAME=VALUE, got {item!r}")
        try:
            out[key] = float(val)
        except ValueError:
            raise ConfigError(f"{what} {key}: {val!r} is not a number") from None
    return out


def _delta(value, n_secondary: int) -> float:
    if value in (None, "auto"):
        if n_secondary < 1:
            raise ConfigError("delta=auto needs a non-empty secondary relation")
        return 1.0 / n_secondary
    try:
        d = float(value)
    except ValueError:
        raise ConfigError(f"delta must be a number or 'auto', got {value!r}") from None
    if not 0 < d < 1:
        raise ConfigError("delta must lie in (0, 1)")
    return d


def _largest_secondary(db) -> int:
    sizes = [len(r) for r in db.relations.values() if r.schema.privacy == "secondary"]
    return max(sizes, default=0)


def build_run(args) -> dict:
    """Merge manifest / config file / flags (flags win) into one run description."""
    run: dict = {"config": {}, "taus": {}, "weights": {}}
    if args.manifest:
        man = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        run.update(man["run"])
    if args.config:
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        for k, v in cfg.items():
            if k in CONFIG_KEYS:
                run["config"][k] = v
            elif k in ("epsilon", "delta", "seed", "schema", "data"):
                run[k] = v
            elif k in ("taus", "weights"):
                run[k].update(v)
            else:
                raise ConfigError(f"unknown config key {k!r}")
    for k in ("schema", "data", "epsilon", "delta", "seed"):
        v = getattr(args, k, None)
        if v is not None:
            run[k] = v
    for flag, key in (("o", "o"), ("n_mrf", "n_mrf"), ("t1", "t1"), ("t2", "t2"), ("k", "k"), ("lam", "lam"),
                      ("merge_from", "merge_from"), ("init_mode", "init_mode")):
        v = getattr(args, flag, None)
        if v is not None:
            run["config"][key] = v
    run["taus"].update({k: int(v) for k, v in _pairs(args.tau, "--tau").items()})
    run["weights"].update(_pairs(args.weight, "--weight"))
    for k in ("schema", "data", "epsilon"):
        if run.get(k) is None:
            raise ConfigError(f"missing required setting {k!r}")
    run.setdefault("seed", 0)
    run.setdefault("delta", "auto")
    return run


def cmd_synthesize(args) -> int:
    run = build_run(args)
    db = load_database(run["schema"], run["data"])
    delta = _delta(run["delta"], _largest_secondary(db))
    threads = args.threads if args.threads is not None else int(os.environ.get(THREADS_ENV, "1"))
    cfg_fields = dict(run["config"], seed=int(run["seed"]))
    try:
        config = SynthesisConfig(**cfg_fields, threads=max(1, threads))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    try:
        params = PrivacyParams.from_eps_delta(float(run["epsilon"]), delta)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    result = synthesize_database(db, params, config, run["weights"] or None, run["taus"] or None)
    out = Path(args.out)
    write_database(result.database, out)
    ledger = result.ledger.to_json()
    (out / "ledger.json").write_text(json.dumps(ledger, indent=1) + "\n", encoding="utf-8")
    config_json = {k: v for k, v in config.to_json().items() if k != "threads"}
    manifest = {
        "run": {"schema": str(run["schema"]), "data": str(run["data"]), "epsilon": float(run["epsilon"]),
                "delta": run["delta"], "seed": int(run["seed"]), "config": config_json, "taus": run["taus"],
                "weights": run["weights"]},
        "privacy": {"epsilon": params.epsilon, "delta": params.delta, "gamma": params.gamma,
                    "budget": params.budget},
        "plan": result.plan.to_json(),
        "ledger": {"total": result.ledger.total, "charges": len(ledger)},
        "order": result.order,
        "stage_costs": result.stage_costs,
        "timings": result.timings,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(result.database.relations)} relations to {out} "
          f"(spent {result.ledger.total:.6g} of {params.budget:.6g})")
    return 0


def cmd_evaluate(args) -> int:
    real = load_database(args.schema, args.real)
    syn_schema = Path(args.synthetic) / "schema.json"
    if syn_schema.exists():
        theirs = schema_to_json(load_schema(syn_schema))
        mine = schema_to_json(real.schemas)
        if theirs != mine:
            raise SchemaError(f"{syn_schema} does not match {args.schema}")
    syn = load_database(args.schema, args.synthetic)
    link = None
    if args.link:
        rel, _, col = args.link.partition(".")
        link = (rel, real[rel].schema.fk(col).references, col)
    report = evaluate(real, syn, args.queries, args.selectivity, args.c, args.seed, link, not args.allow_shared)
    text = json.dumps(report.to_json(), indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    s = report.summary
    print(f"{s['n_queries']} queries: mean relative error {s.get('mean', float('nan')):.4f}, "
          f"median {s.get('median', float('nan')):.4f}")
    return 0


def cmd_demo_ci(args) -> int:
    w_all, w_one, ratio = ci_width_demo(args.M, args.epsilon, args.delta)
    print(f"M={args.M} eps={args.epsilon} delta={args.delta:.6g}")
    print(f"95% CI width, one query per release : {w_one:.4f}")
    print(f"95% CI width, all queries in one go : {w_all:.4f}")
    print(f"ratio                               : {ratio:g}")
    return 0


def cmd_gen_toy(args) -> int:
    spec = PlantedSpec(intra=args.intra, inter=args.inter)
    db = gen_planted_db(args.households, spec, np.random.default_rng(args.seed))
    out = Path(args.out)
    write_database(db, out)
    print(f"wrote planted database ({len(db['household'])} households, {len(db['individual'])} individuals) "
          f"to {out}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relsynth", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthesize", help="produce a synthetic database")
    s.add_argument("--schema")
    s.add_argument("--data")
    s.add_argument("--epsilon", type=float)
    s.add_argument("--delta", help="a number, or 'auto' = 1/|largest secondary relation|")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON file with configuration keys")
    s.add_argument("--manifest", help="re-run the settings recorded in a previous manifest.json")
    s.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
    s.add_argument("--tau", action="append", metavar="REL.FK=VALUE", help="sensitivity of one foreign key")
    s.add_argument("--weight", action="append", metavar="STAGE=W", help="budget weight of a stage")
    s.add_argument("--o", type=int)
    s.add_argument("--n-mrf", dest="n_mrf", type=int)
    s.add_argument("--t1", type=int)
    s.add_argument("--t2", type=int)
    s.add_argument("--k", type=int)
    s.add_argument("--lam", type=float)
    s.add_argument("--merge-from", dest="merge_from", type=int)
    s.add_argument("--init-mode", dest="init_mode", choices=["full", "decompose"])
    s.set_defaults(func=cmd_synthesize)

    e = sub.add_parser("evaluate", help="compare a synthetic database with the real one")
    e.add_argument("--schema", required=True)
    e.add_argument("--real", required=True)
    e.add_argument("--synthetic", required=True)
    e.add_argument("--queries", type=int, default=1000)
    e.add_argument("--selectivity", type=float, default=0.2)
    e.add_argument("--c", type=int, default=1, choices=[1, 2])
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--link", metavar="REL.FK", help="foreign key to evaluate (default: the first private one)")
    e.add_argument("--allow-shared", action="store_true", help="c=2: let one member satisfy both predicates")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    d = sub.add_parser("demo-ci", help="confidence-interval width of M noisy queries")
    d.add_argument("--M", type=int, default=100)
    d.add_argument("--epsilon", type=float, default=3.2)
    d.add_argument("--delta", type=float, default=1 / 3_000_000)
    d.set_defaults(func=cmd_demo_ci)

    g = sub.add_parser("gen-toy", help="write a planted-correlation household database")
    g.add_argument("--households", type=int, default=2000)
    g.add_argument("--intra", type=float, default=0.6)
    g.add_argument("--inter", type=float, default=0.5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_toy)
    return p


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, IntegrityError, CapExceeded, IncompleteRow, DomainError, FileNotFoundError,
            KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BudgetOverdraw as exc:
        print(f"budget error: {exc}", file=sys.stderr)
        return EXIT_BUDGET


if __name__ == "__main__":
    sys.exit(main())
