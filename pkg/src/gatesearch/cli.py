"""Command-line entry point.

Subcommands: search, retrain, export, evaluate, baseline, sweep, verify.
Every run writes its artifacts under the configured output directory;
failures leave a machine-readable `error.json` there and exit nonzero
(2 for configuration problems, 1 for runtime failures).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import cost as costmod
from . import report
from .config import RunConfig, load_config, load_run_dataset
from .errors import ConfigurationError, DataError, GateSearchError
from .search import (SearchConfig, export_architecture, l1_baseline, load_state,
                     materialize, pareto_sweep, random_search, retrain,
                     run_search, save_state, width_multiplier_point,
                     evaluate_accuracy)
from .spaces import Architecture, apply_width_multiplier, build_space
from .graph import NetworkGraph


def _write_error(out_dir: Path, exc: Exception) -> None:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "error.json").write_text(json.dumps(
            {"error": type(exc).__name__, "message": str(exc)}, indent=2))
    except OSError:
        pass


def _prepare(args) -> tuple[RunConfig, object, object]:
    cfg = load_config(args.config)
    if getattr(args, "output", None):
        cfg.out_dir = Path(args.output)
    data = load_run_dataset(cfg)
    space = build_space(cfg.space)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    return cfg, data, space


def _history_records(history) -> list[dict]:
    return history.records


def cmd_search(args) -> int:
    cfg, data, space = _prepare(args)
    scfg = cfg.search if args.seed is None else replace(cfg.search, seed=args.seed)
    outcome = run_search(space, data, scfg, with_retrain=args.retrain)
    out = cfg.out_dir
    report.write_history(out / "history.jsonl", outcome.al_history.records,
                         outcome.al_history.meta)
    outcome.architecture.save(out / "arch.json")
    state = outcome.state
    costmod.report(state.terms, state.fixed_cost, state.gates.pi_map(),
                   scfg.metric).save(out / "cost_report.json")
    save_state(state, out / "state")
    state.gmap.save(out / "groups.json")
    summary = {"cost": outcome.cost, "accuracy": outcome.accuracy,
               "seed": scfg.seed, "lambda": scfg.lam}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    if outcome.retrain_history is not None:
        report.write_history(out / "retrain_history.jsonl",
                             outcome.retrain_history.records,
                             outcome.retrain_history.meta)
    print(f"exported architecture cost={outcome.cost:.0f} "
          f"({scfg.metric}), artifacts in {out}")
    return 0


def cmd_retrain(args) -> int:
    cfg, data, space = _prepare(args)
    arch = Architecture.load(args.arch)
    scfg = cfg.search if args.seed is None else replace(cfg.search, seed=args.seed)
    net = materialize(space, arch)
    acc, history = retrain(net, data, scfg)
    out = cfg.out_dir
    report.write_history(out / "retrain_history.jsonl", history.records,
                         history.meta)
    net.save(out / "model", prefix="model")
    (out / "metrics.json").write_text(json.dumps(
        {"accuracy": acc, "seed": scfg.seed}, indent=2))
    print(f"retrained accuracy={acc:.4f}")
    return 0


def cmd_export(args) -> int:
    state = load_state(Path(args.run) / "state")
    arch = export_architecture(state, mode=args.mode)
    dest = Path(args.out or (Path(args.run) / "arch.json"))
    arch.save(dest)
    print(f"wrote {dest}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    data = load_run_dataset(cfg)
    graph = NetworkGraph.load(Path(args.model), prefix="model")
    acc = evaluate_accuracy(graph, data.x_eval, data.y_eval)
    print(f"eval accuracy={acc:.4f}")
    return 0


def cmd_baseline(args) -> int:
    cfg, data, space = _prepare(args)
    scfg = cfg.search
    out = cfg.out_dir
    entries = []
    if args.method == "width-multiplier":
        alphas = [float(a) for a in args.alphas.split(",")]
        for alpha in alphas:
            arch, c, acc = width_multiplier_point(space, alpha, data, scfg)
            arch.save(out / f"arch_alpha{alpha:g}.json")
            entries.append({"method": f"width-multiplier:{alpha:g}", "cost": c,
                            "accuracy": acc, "seed": scfg.seed})
    elif args.method == "random-search":
        best, points = random_search(space, args.samples, data, scfg)
        for p in points:
            entries.append({"method": "random-search", "cost": p["cost"],
                            "accuracy": p["accuracy"], "seed": scfg.seed})
        best[0].save(out / "arch_random_best.json")
    elif args.method == "l1":
        arch, state, history = l1_baseline(space, data, scfg)
        c = costmod.architecture_cost(space, arch, scfg.metric,
                                      scfg.count_aux_params)
        net = materialize(space, arch, state.channel_scores())
        acc, _ = retrain(net, data, scfg)
        arch.save(out / "arch_l1.json")
        report.write_history(out / "l1_history.jsonl", history.records,
                             history.meta)
        entries.append({"method": "l1", "cost": c, "accuracy": acc,
                        "seed": scfg.seed})
    else:
        raise ConfigurationError(f"unknown baseline method '{args.method}'")
    report.write_report(out / "pareto.csv", entries)
    print(f"wrote {out / 'pareto.csv'} ({len(entries)} rows)")
    return 0


def _sweep_one(payload):
    (config_path, lam, seed, al_epochs) = payload
    cfg = load_config(config_path)
    data = load_run_dataset(cfg)
    space = build_space(cfg.space)
    scfg = replace(cfg.search, lam=lam, seed=seed, al_epochs=al_epochs)
    outcome = run_search(space, data, scfg)
    return {"lambda": lam, "seed": seed, "cost": outcome.cost,
            "accuracy": outcome.accuracy, "al_epochs": al_epochs,
            "arch": outcome.architecture.to_json()}


def cmd_sweep(args) -> int:
    cfg, data, space = _prepare(args)
    lambdas = [float(s) for s in args.lambdas.split(",")]
    seeds = list(range(args.seeds)) if args.seeds else [cfg.search.seed]
    if args.al_epochs:
        budgets = [int(s) for s in args.al_epochs.split(",")]
        if len(budgets) != len(lambdas):
            raise ConfigurationError(
                "--al-epochs must list one budget per lambda")
        epochs_for = dict(zip(lambdas, budgets))
    else:
        epochs_for = None

    jobs = []
    for lam in lambdas:
        ep = (epochs_for or {}).get(lam, cfg.search.al_epochs)
        for seed in seeds:
            jobs.append((str(args.config), lam, seed, ep))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]

    out = cfg.out_dir
    report.write_summary(out / "summary.csv", rows)
    entries = [{"method": "gate-search", "cost": r["cost"],
                "accuracy": r["accuracy"], "seed": r["seed"]} for r in rows]
    report.write_report(out / "pareto.csv", entries)
    (out / "sweep_archs.json").write_text(json.dumps(
        [{"lambda": r["lambda"], "seed": r["seed"], "arch": r["arch"]}
         for r in rows], indent=2))
    print(f"wrote {out / 'summary.csv'} ({len(rows)} rows)")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all
    results = run_all(seed=args.seed)
    all_ok = True
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        all_ok &= ok
    return 0 if all_ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gatesearch",
        description="Differentiable width/operator search with stochastic "
                    "channel gates")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("search", help="gate learning + export + cost report")
    sp.add_argument("--config", required=True)
    sp.add_argument("--output", help="override the output directory")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--retrain", action="store_true",
                    help="also materialize and retrain the exported network")
    sp.set_defaults(fn=cmd_search)

    rp = sub.add_parser("retrain", help="materialize an architecture and retrain")
    rp.add_argument("--config", required=True)
    rp.add_argument("--arch", required=True)
    rp.add_argument("--output")
    rp.add_argument("--seed", type=int)
    rp.set_defaults(fn=cmd_retrain)

    ep = sub.add_parser("export", help="re-export an architecture from a run")
    ep.add_argument("--run", required=True, help="search output directory")
    ep.add_argument("--mode", choices=("expected", "sample"), default="expected")
    ep.add_argument("--out")
    ep.set_defaults(fn=cmd_export)

    vp = sub.add_parser("evaluate", help="accuracy of a saved model checkpoint")
    vp.add_argument("--config", required=True)
    vp.add_argument("--model", required=True)
    vp.set_defaults(fn=cmd_evaluate)

    bp = sub.add_parser("baseline", help="width-multiplier / random-search / l1")
    bp.add_argument("--config", required=True)
    bp.add_argument("--output")
    bp.add_argument("--method", required=True,
                    choices=("width-multiplier", "random-search", "l1"))
    bp.add_argument("--alphas", default="0.25,0.5,1.0")
    bp.add_argument("--samples", type=int, default=30)
    bp.set_defaults(fn=cmd_baseline)

    wp = sub.add_parser("sweep", help="pareto sweep over lambda x seeds")
    wp.add_argument("--config", required=True)
    wp.add_argument("--output")
    wp.add_argument("--lambdas", required=True)
    wp.add_argument("--seeds", type=int, default=0,
                    help="number of seeds (0 = just the configured seed)")
    wp.add_argument("--al-epochs", dest="al_epochs",
                    help="per-lambda budgets, comma separated")
    wp.add_argument("--jobs", type=int, default=1)
    wp.set_defaults(fn=cmd_sweep)

    kp = sub.add_parser("verify", help="run the built-in oracle suite")
    kp.add_argument("--seed", type=int, default=0)
    kp.set_defaults(fn=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = None
    try:
        return args.fn(args)
    except (ConfigurationError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if hasattr(args, "config"):
            try:
                out_dir = load_config(args.config).out_dir
            except GateSearchError:
                out_dir = None
        if out_dir:
            _write_error(out_dir, exc)
        return 2
    except GateSearchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if hasattr(args, "config"):
            try:
                out_dir = load_config(args.config).out_dir
                _write_error(out_dir, exc)
            except GateSearchError:
                pass
        return 1


if __name__ == "__main__":
    sys.exit(main())
