"""Command line experiment runner.

    kvrunahead verify  [--config PATH] [--fault KIND]
    kvrunahead sweep   [--config PATH] [--out results.csv]
    kvrunahead search  [--config PATH] --table table.json
    kvrunahead predict [--config PATH] --table table.json [--context C]
    kvrunahead noise   [--config PATH] [--out noise.csv]

Every command reads one JSON config (missing keys take the defaults in
``DEFAULT_CONFIG``); flags override config fields.  Exit codes: 0 success,
1 a check failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .engine import FAULTS, Strategy, dot_product_counts, run, traffic_pairs
from .estimators import synthetic_context
from .exceptions import (
    ClampWarning,
    ConfigurationError,
    KVRunaheadError,
    PartitionLookupError,
    ProtocolError,
)
from .model import ModelConfig, forward_serial, init_weights
from .oracle import naive_causal_forward
from .partition import (
    ContextPartition,
    PartitionLookupTable,
    SearchConfig,
    even_partition,
    hierarchical_grid_search,
    interpolate_partition,
    partition_from_ratios,
)
from .simnet import (
    CostModel,
    NetworkModel,
    kvr_evaluator,
    noise_study,
    simulate_ttft,
    ttft_practical_lower,
    ttft_star,
)

SWEEP_COLUMNS = [
    "strategy", "C", "p", "partition", "ttft_sim", "speedup", "ttft_star", "ttft_lower",
    "dot_max", "pairs", "rows", "barriers", "max_dev",
]
NOISE_COLUMNS = [
    "strategy", "C", "p", "slowdown_factor", "trials", "mean_degradation", "max_degradation",
]
PREDICT_COLUMNS = [
    "C", "p", "partition", "ratios", "ttft_pred", "ttft_search", "gap", "clamped",
]

DEFAULT_CONFIG = {
    "seed": 0,
    "model": {
        "d_model": 16,
        "n_heads": 4,
        "n_kv_heads": 2,
        "n_layers": 2,
        "precision": "f64",
        "d_ff": None,
        "rms_norm": False,
    },
    "cost": {"alpha": 2e-10, "proj_coeff": 2e-6, "softmax_coeff": 2e-8, "fixed_overhead": 1e-4},
    "network": {"bandwidth": 2e7, "latency": 1e-5},
    "search": {"grid_width": 5, "initial_stride": None, "min_stride": 1},
    "verify": {
        "context_lengths": [9, 16, 33, 64],
        "process_counts": [1, 2, 3, 4, 8],
        "precisions": ["f32", "f64"],
        "rtol_f32": 1e-4,
        "tol_f64": 1e-10,
        "oracle_max_context": 33,
    },
    "sweep": {
        "context_lengths": [1024, 4096, 16384],
        "process_counts": [1, 2, 4],
        "variants": ["tsp", "kvr-e", "kvr-s"],
        "ratios": None,
        "verify_max_context": 256,
    },
    "table": {"context_lengths": [4096, 8192, 12288, 16384], "process_count": 4},
    "predict": {"context_length": 10240},
    "noise": {
        "context_lengths": [8192, 12288, 16384],
        "process_count": 4,
        "slowdown_factor": 8.0,
        "trials": 20,
        "variants": ["tsp", "kvr-e", "kvr-s"],
    },
}

# sweep/noise row label -> (strategy, partition source)
VARIANTS = {
    "serial": (Strategy.SERIAL, "even"),
    "tsp": (Strategy.TSP, "even"),
    "kvr-e": (Strategy.KVR, "even"),
    "kvr-s": (Strategy.KVR, "search"),
    "kvr-r": (Strategy.KVR, "ratios"),
    "kvr-p": (Strategy.KVR, "table"),
}


class UsageError(Exception):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise UsageError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        context = lines[exc.lineno - 1] if 0 < exc.lineno <= len(lines) else ""
        raise UsageError(
            f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {context}\n    {' ' * (exc.colno - 1)}^"
        ) from exc
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: top level must be a JSON object")
    return _merge(DEFAULT_CONFIG, doc)


def _model(cfg: dict, precision: str | None = None) -> ModelConfig:
    m = dict(cfg["model"])
    if precision is not None:
        m["precision"] = precision
    try:
        return ModelConfig(seed=int(cfg["seed"]), **m)
    except (TypeError, ConfigurationError) as exc:
        raise UsageError(f"invalid model config: {exc}") from exc


def _cost(cfg):
    try:
        return CostModel(**cfg["cost"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid cost config: {exc}") from exc


def _network(cfg):
    try:
        return NetworkModel(**cfg["network"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid network config: {exc}") from exc


def _search_config(cfg, evaluator) -> SearchConfig:
    s = cfg["search"]
    return SearchConfig(s["grid_width"], s["initial_stride"], s["min_stride"], evaluator)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.9g}"
    return str(x)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def _rel_dev(actual, expected) -> float:
    scale = float(np.max(np.abs(expected))) or 1.0
    return float(np.max(np.abs(np.asarray(actual, np.float64) - expected))) / scale


# --- verify --------------------------------------------------------------


def _worked_example_checks(checks: list, lines: list) -> None:
    cfg = ModelConfig(d_model=8, n_heads=2, n_layers=1, seed=0)
    w = init_weights(cfg)
    ctx = synthetic_context(9, cfg.d_model, seed=0)
    kvr = run(Strategy.KVR, ctx, ContextPartition.from_sizes([4, 3, 2]), w).metrics
    tsp = run(Strategy.TSP, ctx, even_partition(9, 3), w).metrics
    lines.append(
        f"worked example C=9 p=3 KVR [4,3,2]: dot products per layer {kvr.dot_products_per_layer} "
        f"(max {kvr.max_dot_products}), KV rows sent {kvr.kv_rows_per_layer}"
    )
    lines.append(
        f"worked example C=9 p=3 TSP [3,3,3]: dot products per layer {tsp.dot_products_per_layer} "
        f"(max {tsp.max_dot_products}), KV rows shared {tsp.kv_rows_per_layer}, "
        f"rows received per worker {tsp.rows_received_per_layer}"
    )
    checks.append({"check": "example_kvr_dots", "ok": kvr.dot_products_per_layer == [16, 21, 18]})
    checks.append({"check": "example_kvr_rows", "ok": kvr.kv_rows_per_layer == 22})
    checks.append({"check": "example_tsp_dots", "ok": tsp.dot_products_per_layer == [27, 27, 27]})
    checks.append({"check": "example_tsp_rows", "ok": tsp.kv_rows_per_layer == 36})


def _skewed(C: int, p: int) -> ContextPartition:
    # front-loaded split, the shape KVR load balancing tends to pick
    weights = np.arange(p, 0, -1, dtype=float) + p
    return partition_from_ratios(C, weights / weights.sum())


def cmd_verify(cfg: dict, args) -> int:
    v = cfg["verify"]
    checks: list[dict] = []
    lines: list[str] = []
    _worked_example_checks(checks, lines)

    for precision in v["precisions"]:
        model = _model(cfg, precision)
        w = init_weights(model)
        tol = v["rtol_f32"] if precision == "f32" else v["tol_f64"]
        for C in v["context_lengths"]:
            ctx = synthetic_context(C, model.d_model, seed=int(cfg["seed"]) + C, precision=precision)
            ref, _ = forward_serial(ctx, w)
            if precision == "f64" and C <= v["oracle_max_context"]:
                dev = _rel_dev(ref, naive_causal_forward(ctx, w))
                checks.append({"check": "serial_vs_naive", "C": C, "dev": dev, "ok": dev <= tol})
            for p in v["process_counts"]:
                if p > C:
                    continue
                cases = [(Strategy.SERIAL, even_partition(C, 1))] if p == 1 else []
                cases += [(Strategy.TSP, even_partition(C, p)), (Strategy.KVR, even_partition(C, p)),
                          (Strategy.KVR, _skewed(C, p))]
                for strategy, part in cases:
                    res = run(strategy, ctx, part, w, schedule=int(cfg["seed"]) + p)
                    dev = _rel_dev(res.hidden_out, ref)
                    m = res.metrics
                    expected_barriers = model.n_layers if strategy is Strategy.TSP and p > 1 else 0
                    row = {
                        "check": "equivalence",
                        "precision": precision,
                        "strategy": strategy.value,
                        "C": C,
                        "p": p,
                        "partition": str(part),
                        "dev": dev,
                        "dots_ok": m.dot_products_per_layer == dot_product_counts(strategy, part),
                        "traffic_ok": m.kv_pairs_per_layer == traffic_pairs(strategy, part),
                        "barriers_ok": m.barrier_count == expected_barriers,
                    }
                    row["ok"] = dev <= tol and row["dots_ok"] and row["traffic_ok"] and row["barriers_ok"]
                    checks.append(row)

    if args.fault:
        model = _model(cfg)
        w = init_weights(model)
        C, p = 16, 4
        try:
            run(Strategy.KVR, synthetic_context(C, model.d_model), even_partition(C, p), w,
                fault=args.fault)
            checks.append({"check": f"fault:{args.fault}", "ok": True})
        except ProtocolError as exc:
            lines.append(f"protocol error under fault {args.fault}: {exc}")
            checks.append({"check": f"fault:{args.fault}", "ok": False, "error": str(exc)})

    failed = [c for c in checks if not c["ok"]]
    for c in checks:
        if c["check"] == "equivalence":
            lines.append(
                f"{'PASS' if c['ok'] else 'FAIL'} {c['precision']} {c['strategy']:<6} C={c['C']:<4} "
                f"p={c['p']} {c['partition']:<22} dev={c['dev']:.2e}"
            )
        else:
            lines.append(f"{'PASS' if c['ok'] else 'FAIL'} {c['check']}" +
                         (f" C={c['C']} dev={c['dev']:.2e}" if "dev" in c else ""))
    lines.append(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    summary = {"passed": len(checks) - len(failed), "failed": len(failed), "checks": checks}

    if args.format == "json" and not args.out:
        sys.stdout.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write("\n".join(lines) + "\n")
        if args.out:
            Path(args.out).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 1 if failed else 0


# --- sweep ---------------------------------------------------------------


def _load_table(path: str | None) -> PartitionLookupTable:
    if not path:
        raise UsageError("--table is required")
    try:
        return PartitionLookupTable.load(path)
    except OSError as exc:
        raise UsageError(f"cannot read table {path}: {exc.strerror}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"malformed table {path}: {exc}") from exc


def cmd_sweep(cfg: dict, args) -> int:
    s = cfg["sweep"]
    model = _model(cfg)
    cost, net = _cost(cfg), _network(cfg)
    zero = NetworkModel.zero_comm()
    table = _load_table(args.table) if "kvr-p" in s["variants"] else None
    for name in s["variants"]:
        if name not in VARIANTS:
            raise UsageError(f"unknown sweep variant {name!r}")
    weights = init_weights(model)
    rows = []
    for C in sorted(s["context_lengths"]):
        serial_ttft = simulate_ttft(Strategy.SERIAL, ContextPartition((0, C)), model, cost, net).ttft
        ctx = ref = None
        if C <= s["verify_max_context"]:
            ctx = synthetic_context(C, model.d_model, seed=int(cfg["seed"]) + C, precision=model.precision)
            ref, _ = forward_serial(ctx, weights)
        for p in sorted(s["process_counts"]):
            if p > C:
                print(f"warning: skipping C={C} p={p} (fewer tokens than workers)", file=sys.stderr)
                for name in s["variants"]:
                    rows.append({"strategy": name, "C": C, "p": p, "partition": "infeasible"})
                continue
            star = ttft_star(C, p, cost.whole_model_alpha(model))
            lower = ttft_practical_lower(C, p, model, cost, _search_config(cfg, None))
            for name in s["variants"]:
                strategy, source = VARIANTS[name]
                if strategy is Strategy.SERIAL and p != 1:
                    continue
                part = _sweep_partition(source, C, p, cfg, model, cost, net, table)
                ttft = simulate_ttft(strategy, part, model, cost, net).ttft
                row = {
                    "strategy": name, "C": C, "p": p, "partition": str(part), "ttft_sim": ttft,
                    "speedup": serial_ttft / ttft, "ttft_star": star, "ttft_lower": lower,
                }
                if ctx is not None:
                    res = run(strategy, ctx, part, weights)
                    m = res.metrics
                    row.update(dot_max=m.max_dot_products, pairs=m.kv_pairs_per_layer,
                               rows=m.kv_rows_per_layer, barriers=m.barrier_count,
                               max_dev=_rel_dev(res.hidden_out, ref))
                else:
                    pairs = traffic_pairs(strategy, part)
                    row.update(dot_max=max(dot_product_counts(strategy, part)), pairs=pairs,
                               rows=2 * pairs,
                               barriers=model.n_layers if strategy is Strategy.TSP and p > 1 else 0)
                rows.append(row)
    if args.format == "json":
        _emit(json.dumps(rows, indent=2) + "\n", args.out)
    else:
        _emit(_csv_text(SWEEP_COLUMNS, rows), args.out)
    return 0


def _sweep_partition(source, C, p, cfg, model, cost, net, table):
    if source == "even" or p == 1:
        return even_partition(C, p)
    if source == "search":
        return hierarchical_grid_search(C, p, _search_config(cfg, kvr_evaluator(model, cost, net))).partition
    if source == "ratios":
        ratios = cfg["sweep"]["ratios"]
        if not ratios or str(p) not in ratios:
            raise UsageError(f"sweep.ratios needs an entry for p={p}")
        return partition_from_ratios(C, ratios[str(p)], p)
    if table.p != p:
        raise UsageError(f"lookup table is for p={table.p}, sweep requested p={p}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClampWarning)
        return partition_from_ratios(C, interpolate_partition(table, C), p)


# --- search / predict ----------------------------------------------------


def cmd_search(cfg: dict, args) -> int:
    t = cfg["table"]
    p = int(t["process_count"])
    model = _model(cfg)
    evaluator = kvr_evaluator(model, _cost(cfg), _network(cfg))
    path = args.table or args.out
    table = PartitionLookupTable(p)
    if path and Path(path).exists():
        table = _load_table(path)
        if table.p != p:
            raise UsageError(f"existing table {path} is for p={table.p}, config asks p={p}")
    status = 0
    for C in sorted(t["context_lengths"]):
        try:
            res = hierarchical_grid_search(int(C), p, _search_config(cfg, evaluator))
        except KVRunaheadError as exc:
            print(f"C={C} p={p} search failed: {exc}", file=sys.stderr)
            status = 1
            continue
        ratios = [s / C for s in res.partition.sizes]
        table.add(C, ratios)
        print(
            f"C={C} p={p} partition {list(res.partition.sizes)} "
            f"ratios [{', '.join(f'{r:.3f}' for r in ratios)}] ttft {res.ttft:.6g}"
        )
    text = json.dumps(table.to_dict(), indent=2) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)
    return status


def cmd_predict(cfg: dict, args) -> int:
    table = _load_table(args.table)
    C = int(args.context if args.context is not None else cfg["predict"]["context_length"])
    model = _model(cfg)
    cost, net = _cost(cfg), _network(cfg)
    clamped = False
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ClampWarning)
        try:
            ratios = interpolate_partition(table, C)
        except PartitionLookupError as exc:
            raise UsageError(str(exc)) from exc
    for w in caught:
        if issubclass(w.category, ClampWarning):
            clamped = True
            print(f"warning: {w.message}", file=sys.stderr)
    part = partition_from_ratios(C, ratios, table.p)
    evaluator = kvr_evaluator(model, cost, net)
    pred = evaluator(part)
    fresh = hierarchical_grid_search(C, table.p, _search_config(cfg, evaluator)).ttft
    row = {
        "C": C, "p": table.p, "partition": str(part),
        "ratios": "[" + ",".join(f"{r:.6f}" for r in ratios) + "]",
        "ttft_pred": pred, "ttft_search": fresh, "gap": pred / fresh - 1, "clamped": clamped,
    }
    if args.format == "json":
        row["ratios"] = [float(r) for r in ratios]
        _emit(json.dumps(row, indent=2) + "\n", args.out)
    else:
        _emit(_csv_text(PREDICT_COLUMNS, [row]), args.out)
    return 0


# --- noise ---------------------------------------------------------------


def cmd_noise(cfg: dict, args) -> int:
    n = cfg["noise"]
    p = int(n["process_count"])
    model = _model(cfg)
    cost, net = _cost(cfg), _network(cfg)
    factor, trials = float(n["slowdown_factor"]), int(n["trials"])
    if trials < 1:
        raise UsageError("noise.trials must be >= 1")
    rows = []
    per_variant: dict[str, list[float]] = {}
    for C in sorted(n["context_lengths"]):
        for name in n["variants"]:
            if name not in VARIANTS or VARIANTS[name][1] not in ("even", "search"):
                raise UsageError(f"unsupported noise variant {name!r}")
            strategy, source = VARIANTS[name]
            part = _sweep_partition(source, C, p, cfg, model, cost, net, None)
            stats = noise_study(strategy, part, model, cost, net, factor, trials, int(cfg["seed"]) + C)
            per_variant.setdefault(name, []).extend(stats.degradations)
            rows.append({
                "strategy": name, "C": C, "p": p, "slowdown_factor": factor, "trials": trials,
                "mean_degradation": stats.mean, "max_degradation": stats.max,
            })
    for name, degr in per_variant.items():
        rows.append({
            "strategy": name, "C": "all", "p": p, "slowdown_factor": factor, "trials": len(degr),
            "mean_degradation": float(np.mean(degr)), "max_degradation": float(np.max(degr)),
        })
    verdict = _noise_verdict(per_variant)
    print(f"verdict: {verdict}", file=sys.stderr)
    if args.format == "json":
        _emit(json.dumps({"rows": rows, "verdict": verdict}, indent=2) + "\n", args.out)
    else:
        _emit(_csv_text(NOISE_COLUMNS, rows), args.out)
    return 0


def _noise_verdict(per_variant: dict[str, list[float]]) -> str:
    tsp = per_variant.get("tsp")
    kvr = [np.mean(v) for k, v in per_variant.items() if k.startswith("kvr")]
    if tsp is None or not kvr:
        return "n/a"
    if all(m < np.mean(tsp) for m in kvr):
        return "KVR more robust"
    if all(m == np.mean(tsp) for m in kvr):
        return "no difference"
    return "TSP not less robust"


# --- entry point ---------------------------------------------------------

COMMANDS = {
    "verify": cmd_verify,
    "sweep": cmd_sweep,
    "search": cmd_search,
    "predict": cmd_predict,
    "noise": cmd_noise,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--out", metavar="PATH", help="output file (default: stdout)")
    common.add_argument("--table", metavar="PATH", help="partition lookup table (JSON)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")

    parser = argparse.ArgumentParser(prog="kvrunahead", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    verify = sub.add_parser("verify", parents=[common], help="equivalence and accounting checks")
    verify.add_argument("--fault", choices=FAULTS, help="inject a KV handoff fault")
    sub.add_parser("sweep", parents=[common], help="simulated TTFT / speedup table")
    sub.add_parser("search", parents=[common], help="build or update a partition lookup table")
    predict = sub.add_parser("predict", parents=[common], help="interpolate a partition from a table")
    predict.add_argument("--context", type=int, metavar="C", help="context length to predict")
    sub.add_parser("noise", parents=[common], help="noisy-link robustness study")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KVRunaheadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
