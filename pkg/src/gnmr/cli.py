"""Command-line front end: ``gnmr <subcommand> ...``.

Exit codes: 0 success, 2 configuration or input error, 3 incompatible
artifacts (checkpoint vs dataset cache, corrupt files), 4 NaN/Inf detected.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cmapss
from .errors import CompatibilityError, ConfigError, GnmrError, LoadError, NumericalError
from .evaluation import (
    attention_profile,
    evaluate,
    read_eval_report,
    write_attention_profile,
    write_eval_report,
    write_grid_results,
    write_history,
    write_metrics,
)
from .graph import VARIANTS, load_graph_config, named_variant, save_graph_config
from .model import deserialize, serialize
from .train import DEFAULT_GRID, TrainConfig, grid_search, make_model, train

log = logging.getLogger("gnmr")

EXIT_OK, EXIT_CONFIG, EXIT_COMPAT, EXIT_NUMERIC = 0, 2, 3, 4

EXPERIMENT_DEFAULTS = {
    "dataset": "FD001",
    "data_dir": None,
    "graph": "original",
    "graph_seed": 0,
    "cache_dir": "cache",
    "out": "runs/default",
    "window_length": cmapss.WINDOW_LENGTH,
    "shift": cmapss.WINDOW_SHIFT,
    "r_u": cmapss.RUL_CEILING,
    "val_ratio": 0.8,
    "data_seed": 0,
    "train": {},
    "grid": None,
}
_VARIANT_NAMES = set(VARIANTS) | {"reduced4", "increased13", "single"}


def resolve_graph(name, seed=0):
    """A named variant of the shipped turbofan graph, or a path to a graph config JSON."""
    if name in _VARIANT_NAMES:
        return named_variant(name, seed=seed)
    return load_graph_config(name)


def _dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _data_params(exp, graph):
    return {
        "dataset": exp["dataset"],
        "graph_hash": graph.structure_hash(),
        "window_length": exp["window_length"],
        "shift": exp["shift"],
        "r_u": float(exp["r_u"]),
        "seed": exp["data_seed"],
        "ratio": exp["val_ratio"],
    }


def load_or_prepare(params, data_dir, cache_dir):
    """Read the dataset cache for ``params`` or build it from the raw files."""
    path = cmapss.cache_path(cache_dir, params)
    if path.exists():
        log.info("using dataset cache %s", path)
        return cmapss.load_dataset(path), path
    data_dir = data_dir or cmapss.default_data_dir()
    if data_dir is None:
        raise ConfigError(f"no dataset cache at {path} and no data directory (use --data-dir or ${cmapss.DATA_DIR_ENV})")
    ds = cmapss.prepare_dataset(
        params["dataset"], data_dir, params["graph_hash"], params["window_length"], params["shift"],
        params["r_u"], params["seed"], params["ratio"],
    )
    path, _ = cmapss.save_dataset(ds, cache_dir)
    log.info("wrote dataset cache %s", path)
    return ds, path


# -- config resolution ---------------------------------------------------------------

_TRAIN_FLAGS = ("model", "d", "tau", "gru_layers", "max_epochs", "patience", "seed", "batch_size", "lr0", "dropout", "grad_clip")
_EXP_FLAGS = ("dataset", "data_dir", "graph", "cache_dir", "out")


def resolve_experiment(args):
    exp = json.loads(json.dumps(EXPERIMENT_DEFAULTS))
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        unknown = sorted(set(raw) - set(EXPERIMENT_DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        exp.update(raw)
    for name in _EXP_FLAGS:
        if getattr(args, name, None) is not None:
            exp[name] = getattr(args, name)
    train_raw = dict(exp["train"] or {})
    for name in _TRAIN_FLAGS:
        if getattr(args, name, None) is not None:
            train_raw[name] = getattr(args, name)
    if exp["dataset"] not in cmapss.DATASETS:
        raise ConfigError(f"unknown dataset {exp['dataset']!r}; expected one of {cmapss.DATASETS}")
    cfg = TrainConfig.from_dict(train_raw).validate()
    exp["train"] = cfg.to_dict()
    return exp, cfg


def _fit(exp, cfg, out):
    graph = resolve_graph(exp["graph"], exp["graph_seed"])
    params = _data_params(exp, graph)
    ds, _ = load_or_prepare(params, exp["data_dir"], exp["cache_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(exp, out / "config.json")
    model = make_model(cfg, graph if cfg.model == "gnmr" else None, ds.train)
    log.info("training %s (%d parameters) on %d windows", model.kind, model.n_parameters(), len(ds.train))
    model, history = train(model, ds.train, ds.val, cfg, log=log.info)
    return graph, params, ds, model, history


def _save_run(out, model, history, params):
    write_history(history, out / "history.csv")
    (out / "best.ckpt").write_bytes(serialize(model, extra={"data": params}))


# -- subcommands ---------------------------------------------------------------------


def cmd_prepare(args):
    graph = resolve_graph(args.graph, args.graph_seed)
    exp = {
        "dataset": args.dataset, "window_length": args.window_length, "shift": args.shift, "r_u": args.r_u,
        "data_seed": args.seed, "val_ratio": args.val_ratio,
    }
    data_dir = args.data_dir or cmapss.default_data_dir()
    if data_dir is None:
        raise ConfigError(f"no data directory given (use --data-dir or ${cmapss.DATA_DIR_ENV})")
    params = _data_params(exp, graph)
    ds = cmapss.prepare_dataset(
        args.dataset, data_dir, params["graph_hash"], args.window_length, args.shift, args.r_u, args.seed, args.val_ratio
    )
    path, digest = cmapss.save_dataset(ds, args.out)
    summary = {**ds.summary, "cache": str(path), "sha256": digest}
    _dump_json(summary, path.with_suffix(".summary.json"))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train(args):
    exp, cfg = resolve_experiment(args)
    out = Path(exp["out"])
    _, params, _, model, history = _fit(exp, cfg, out)
    _save_run(out, model, history, params)
    print(f"best epoch {history.best_epoch}  val_rmse {history.best_val_rmse:.4f}  -> {out / 'best.ckpt'}")
    return EXIT_OK


def cmd_grid(args):
    exp, base = resolve_experiment(args)
    grid = exp["grid"] or {k: list(v) for k, v in DEFAULT_GRID.items()}
    exp["grid"] = grid
    graph = resolve_graph(exp["graph"], exp["graph_seed"])
    params = _data_params(exp, graph)
    ds, _ = load_or_prepare(params, exp["data_dir"], exp["cache_dir"])
    out = Path(exp["out"])
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(exp, out / "config.json")
    result = grid_search(ds.train, ds.val, base, grid, graph if base.model == "gnmr" else None, jobs=args.jobs)
    write_grid_results(result, out / "grid_results.csv")
    best = result.best
    _save_run(out, best.model, best.history, params)
    _dump_json(best.config.to_dict(), out / "best_config.json")
    print(f"{len(result.points)} runs; best d={best.config.d} tau={best.config.tau} "
          f"layers={best.config.gru_layers} val_rmse {best.val_rmse:.4f}")
    return EXIT_OK


def cmd_evaluate(args):
    try:
        model, extra = deserialize(Path(args.checkpoint).read_bytes())
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {args.checkpoint}") from None
    params = dict(extra.get("data") or {})
    if not params:
        raise LoadError("checkpoint carries no dataset parameters")
    params["dataset"] = args.dataset
    if args.cache:
        ds = cmapss.load_dataset(args.cache)
    else:
        ds, _ = load_or_prepare(params, args.data_dir, args.cache_dir)
    if model.kind == "gnmr" and ds.graph_hash != model.graph.structure_hash():
        raise CompatibilityError(
            f"checkpoint graph {model.graph.structure_hash()[:12]} does not match dataset cache graph {ds.graph_hash[:12]}"
        )
    report = evaluate(model, ds.test, clamp=not args.no_clamp)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    write_eval_report(report, out / "eval_report.csv")
    write_metrics(report, out / "metrics.csv")
    print(f"rmse {report.rmse:.4f}  S {report.score:.4f}  n {len(report)}")
    return EXIT_OK


def cmd_perturb_graph(args):
    base = resolve_graph(args.base) if args.base else None
    g = named_variant(args.variant, base=base, seed=args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_graph_config(g, args.out)
    print(f"{args.variant}: {g.n_nodes} nodes, {len(g.edges)} edges -> {args.out}")
    return EXIT_OK


def cmd_attention_report(args):
    report = read_eval_report(args.report)
    if args.bin_width <= 0 or args.max_rul <= 0:
        raise ConfigError("--bin-width and --max-rul must be positive")
    bins = np.arange(0.0, args.max_rul + args.bin_width / 2, args.bin_width)
    fault = int(args.fault_node) if args.fault_node.isdigit() else args.fault_node
    profile = attention_profile(report, fault, bins)
    out = Path(args.out) if args.out else Path(args.report).parent / "attention_profile.csv"
    write_attention_profile(profile, out)
    print(f"attention profile for {profile.fault_node} ({int(profile.counts.sum())} instances) -> {out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def _add_experiment_flags(p):
    p.add_argument("--config", help="experiment config JSON; flags override its fields")
    p.add_argument("--dataset", choices=cmapss.DATASETS)
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--graph", help="graph config path or variant name")
    p.add_argument("--cache-dir", dest="cache_dir")
    p.add_argument("--out")
    p.add_argument("--model", choices=("gnmr", "gru_mr", "pca_gru_mr"))
    p.add_argument("--d", type=int)
    p.add_argument("--tau", type=int)
    p.add_argument("--gru-layers", dest="gru_layers", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--grad-clip", dest="grad_clip", type=float)


def build_parser():
    parser = argparse.ArgumentParser(prog="gnmr", description="Graph-based RUL estimation on C-MAPSS.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="parse, split, normalize and window a dataset into a cache file")
    p.add_argument("--dataset", required=True, choices=cmapss.DATASETS)
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--graph", default="original")
    p.add_argument("--graph-seed", dest="graph_seed", type=int, default=0)
    p.add_argument("--out", default="cache", help="cache directory")
    p.add_argument("--window-length", dest="window_length", type=int, default=cmapss.WINDOW_LENGTH)
    p.add_argument("--shift", type=int, default=cmapss.WINDOW_SHIFT)
    p.add_argument("--r-u", dest="r_u", type=float, default=cmapss.RUL_CEILING)
    p.add_argument("--val-ratio", dest="val_ratio", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="grid search over d, tau and GRU layers")
    _add_experiment_flags(p)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, choices=cmapss.DATASETS)
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--cache", help="explicit dataset cache file")
    p.add_argument("--cache-dir", dest="cache_dir", default="cache")
    p.add_argument("--out")
    p.add_argument("--no-clamp", dest="no_clamp", action="store_true", help="skip clamping predictions to [0, r_u]")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("perturb-graph", help="write a structural variant of a graph config")
    p.add_argument("--base", help="graph config path (default: shipped 8-node turbofan graph)")
    p.add_argument("--variant", required=True, choices=sorted(_VARIANT_NAMES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_perturb_graph)

    p = sub.add_parser("attention-report", help="bin attention weights by true RUL")
    p.add_argument("--report", required=True, help="eval_report.csv from 'evaluate'")
    p.add_argument("--fault-node", dest="fault_node", default="HPC")
    p.add_argument("--bin-width", dest="bin_width", type=float, default=10.0)
    p.add_argument("--max-rul", dest="max_rul", type=float, default=130.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_attention_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CompatibilityError, LoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (GnmrError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
