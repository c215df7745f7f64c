"""Command-line entry point.

Subcommands:
  simulate   generate a benchmark series (lorenz96 | var) + ground-truth graph
  train      train all components on a CSV series and extract the graph
  sweep      train across several sparsity values, score edges by survival
  evaluate   compare a graph JSON against a truth JSON

Every command writes a ``manifest.json`` holding the resolved configuration,
seed, artifact paths, tool version, and wall-clock time; rerunning a command
with ``--config manifest.json`` reproduces the result (checkpoints included)
byte for byte.  Exit codes: 0 success, 1 runtime failure, 2 usage error.
Set GCDISC_LOG=DEBUG|INFO|WARNING to control verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__, graph, train as train_mod
from .dataset import DataError, load_csv, save_csv
from .graph import GCGraph, MetricsReport, auroc, confusion_metrics, edge_scores_from_sweep
from .selector import alpha, column_norms
from .simulate import Lorenz96Config, VARConfig, simulate_lorenz96, simulate_var
from .train import TrainConfig

log = logging.getLogger("gcdisc")


def _setup_logging() -> None:
    level = os.environ.get("GCDISC_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config_file(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    # accept a previous run's manifest directly
    if "config" in cfg and isinstance(cfg["config"], dict):
        inner = dict(cfg["config"])
        if "data" in cfg and "data" not in inner:
            inner["data"] = cfg["data"]
        return inner
    return cfg


def _write_manifest(out_dir: str, command: str, config: dict, seed: int,
                    artifacts: dict, wall_s: float, extra: dict | None = None) -> str:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config": config,
        "seed": seed,
        "artifacts": artifacts,
        "wall_clock_s": wall_s,
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return path


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    file_cfg = _load_config_file(args.config) if args.config else {}
    file_cfg.pop("data", None)
    file_cfg.pop("kind", None)
    cfg_cls = Lorenz96Config if args.kind == "lorenz96" else VARConfig
    known = {f.name for f in dataclasses.fields(cfg_cls)}
    unknown = set(file_cfg) - known
    if unknown:
        raise ValueError(f"unknown {args.kind} config keys: {sorted(unknown)}")
    cfg = cfg_cls(**file_cfg)
    for name in known:
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    cfg.validate()

    dataset = simulate_lorenz96(cfg) if args.kind == "lorenz96" else simulate_var(cfg)
    os.makedirs(args.out, exist_ok=True)
    data_path = os.path.join(args.out, "data.csv")
    truth_path = os.path.join(args.out, "truth.json")
    save_csv(dataset, data_path)
    dataset.truth.save_json(truth_path)
    _write_manifest(
        args.out, f"simulate {args.kind}", dataclasses.asdict(cfg), cfg.seed,
        {"data": data_path, "truth": truth_path}, time.perf_counter() - t0,
        extra={"kind": args.kind},
    )
    log.info("simulated %s: %d variates x %d steps, %d true edges",
             args.kind, dataset.n_variates, dataset.n_steps, dataset.truth.edge_count())
    print(data_path)
    return 0


def _train_config_from_args(args) -> tuple[TrainConfig, str]:
    file_cfg = _load_config_file(args.config) if args.config else {}
    data = args.data or file_cfg.pop("data", None)
    if not data:
        raise ValueError("no data CSV given (positional argument or manifest 'data' key)")
    file_cfg.pop("lambdas", None)
    cfg = TrainConfig.from_dict(file_cfg)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "sparsity", None) is not None:
        cfg.sparsity = args.sparsity
    if args.ablation:
        cfg.ablation = {"lstm": "lstm_forecaster", "group-lasso": "group_lasso"}[args.ablation]
    if args.lag_mode:
        cfg.lag_mode = {"shared": "shared", "per-lag": "per_lag"}[args.lag_mode]
    cfg.validate()
    return cfg, data


def _run_training(data_path: str, cfg: TrainConfig, out_dir: str, workers: int | None):
    """Shared by train and sweep: full run + artifacts in out_dir."""
    dataset = load_csv(data_path)
    os.makedirs(os.path.join(out_dir, "components"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "history"), exist_ok=True)
    result = train_mod.train_all(dataset, cfg, workers=workers)
    artifacts = {"components": [], "history": []}
    summary = {"failures": result.failures, "components": []}
    for v in range(dataset.n_variates):
        model, history = result.models[v], result.histories[v]
        if model is None:
            log.warning("component %d failed: %s", v, result.failures.get(v))
            summary["components"].append({"variate": v, "failed": True})
            continue
        ckpt = os.path.join(out_dir, "components", f"v{v:03d}.ckpt")
        hist = os.path.join(out_dir, "history", f"v{v:03d}.ndjson")
        train_mod.save_component(model, ckpt)
        history.save_ndjson(hist)
        artifacts["components"].append(ckpt)
        artifacts["history"].append(hist)
        norms = column_norms(model.selector)
        summary["components"].append({
            "variate": v,
            "active_columns": int(history.active[-1]),
            "l_pred_final": float(history.l_pred[-1]),
            "l_red_final": float(history.l_red[-1]),
            "alpha": alpha(model.selector).tolist(),
            "column_norms": norms.tolist(),
        })
    if result.failures:
        raise RuntimeError(f"training failed for components {sorted(result.failures)}")
    extracted = graph.extract_graph(result.models)
    graph_json = os.path.join(out_dir, "graph.json")
    graph_csv = os.path.join(out_dir, "graph.csv")
    graph_dot = os.path.join(out_dir, "graph.dot")
    extracted.save_json(graph_json)
    extracted.save_csv(graph_csv)
    extracted.save_dot(graph_dot)
    artifacts.update({"graph": graph_json, "graph_csv": graph_csv, "graph_dot": graph_dot})
    summary_path = os.path.join(out_dir, "summary.json")
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1)
        fh.write("\n")
    artifacts["summary"] = summary_path
    return extracted, artifacts


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg, data = _train_config_from_args(args)
    extracted, artifacts = _run_training(data, cfg, args.out, args.workers)
    if args.truth:
        truth = GCGraph.load_json(args.truth)
        report = confusion_metrics(extracted, truth)
        metrics_path = os.path.join(args.out, "metrics.json")
        with open(metrics_path, "w", encoding="utf-8") as fh:
            json.dump(report.to_json_dict(), fh, indent=1)
            fh.write("\n")
        artifacts["metrics"] = metrics_path
        log.info("accuracy %.4f balanced accuracy %.4f",
                 report.accuracy, report.balanced_accuracy)
    manifest_cfg = cfg.to_dict()
    _write_manifest(args.out, "train", manifest_cfg, cfg.seed, artifacts,
                    time.perf_counter() - t0, extra={"data": data})
    log.info("extracted %d edges over %d variates",
             extracted.edge_count(), extracted.n_variates)
    print(os.path.join(args.out, "graph.json"))
    return 0


def cmd_sweep(args) -> int:
    t0 = time.perf_counter()
    cfg, data = _train_config_from_args(args)
    lambdas = [float(x) for x in args.lambdas.split(",") if x.strip() != ""]
    if len(lambdas) < 2:
        raise ValueError(f"a sweep needs at least 2 sparsity values, got {lambdas}")
    truth = GCGraph.load_json(args.truth) if args.truth else None
    os.makedirs(args.out, exist_ok=True)
    sweep = []
    per_lambda = {}
    artifacts = {"runs": []}
    for lam in lambdas:
        run_cfg = dataclasses.replace(cfg, sparsity=lam)
        run_dir = os.path.join(args.out, f"lambda_{lam:g}")
        extracted, _ = _run_training(data, run_cfg, run_dir, args.workers)
        sweep.append((lam, extracted))
        artifacts["runs"].append(run_dir)
        entry = {"edges": extracted.edge_count()}
        if truth is not None:
            report = confusion_metrics(extracted, truth)
            entry.update(accuracy=report.accuracy, balanced_accuracy=report.balanced_accuracy)
        per_lambda[f"{lam:g}"] = entry
        log.info("lambda %g: %s", lam, entry)
    scores = edge_scores_from_sweep(sweep)
    scores_path = os.path.join(args.out, "edge_scores.csv")
    np.savetxt(scores_path, scores.scores, fmt="%.6g", delimiter=",")
    artifacts["edge_scores"] = scores_path
    result = {"lambdas": lambdas, "per_lambda": per_lambda}
    if truth is not None:
        result["auroc"] = auroc(scores, truth)
        best = max(per_lambda, key=lambda k: per_lambda[k]["balanced_accuracy"])
        result["best_lambda"] = float(best)
        result["best_balanced_accuracy"] = per_lambda[best]["balanced_accuracy"]
        log.info("sweep AUROC %.4f, best lambda %s", result["auroc"], best)
    sweep_path = os.path.join(args.out, "sweep.json")
    with open(sweep_path, "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=1)
        fh.write("\n")
    artifacts["sweep"] = sweep_path
    manifest_cfg = cfg.to_dict()
    manifest_cfg["lambdas"] = lambdas
    _write_manifest(args.out, "sweep", manifest_cfg, cfg.seed, artifacts,
                    time.perf_counter() - t0, extra={"data": data})
    print(sweep_path)
    return 0


def cmd_evaluate(args) -> int:
    pred = GCGraph.load_json(args.graph)
    truth = GCGraph.load_json(args.truth)
    report: MetricsReport = confusion_metrics(pred, truth,
                                              include_diagonal=not args.exclude_diagonal)
    payload = report.to_json_dict()
    print(json.dumps(payload, indent=1))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)
            fh.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gcdisc",
        description="Granger-causal graph discovery from multivariate time series",
    )
    parser.add_argument("--version", action="version", version=f"gcdisc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a benchmark series with known truth")
    sim.add_argument("kind", choices=["lorenz96", "var"])
    sim.add_argument("--config", help="JSON config (or a previous manifest)")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--variates", dest="n_variates", type=int)
    sim.add_argument("--steps", dest="n_steps", type=int)
    sim.add_argument("--burn-in", dest="burn_in", type=int)
    sim.add_argument("--forcing", type=float, help="lorenz96: forcing coefficient")
    sim.add_argument("--dt", type=float, help="lorenz96: sampling interval")
    sim.add_argument("--noise-std", dest="noise_std", type=float)
    sim.add_argument("--lags", dest="n_lags", type=int, help="var: lag order")
    sim.add_argument("--extra-edges", dest="extra_edges", type=int)
    sim.add_argument("--coeff-scale", dest="coeff_scale", type=float)
    sim.set_defaults(func=cmd_simulate)

    def add_train_args(p, with_lambda: bool):
        p.add_argument("data", nargs="?", help="input CSV (rows = time steps)")
        p.add_argument("--config", help="JSON config (or a previous manifest)")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, default=os.cpu_count())
        p.add_argument("--ablation", choices=["lstm", "group-lasso"])
        p.add_argument("--lag-mode", choices=["shared", "per-lag"])
        p.add_argument("--truth", help="truth JSON for metrics")
        if with_lambda:
            p.add_argument("--lambda", dest="sparsity", type=float,
                           help="sparsity weight")

    tr = sub.add_parser("train", help="train all components and extract the graph")
    add_train_args(tr, with_lambda=True)
    tr.set_defaults(func=cmd_train)

    sw = sub.add_parser("sweep", help="train across sparsity values and score edges")
    add_train_args(sw, with_lambda=False)
    sw.add_argument("--lambdas", required=True,
                    help="comma-separated sparsity values (at least 2)")
    sw.set_defaults(func=cmd_sweep)

    ev = sub.add_parser("evaluate", help="compare a graph JSON against a truth JSON")
    ev.add_argument("graph")
    ev.add_argument("truth")
    ev.add_argument("--out", help="also write the metrics JSON here")
    ev.add_argument("--exclude-diagonal", action="store_true")
    ev.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, DataError, RuntimeError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
