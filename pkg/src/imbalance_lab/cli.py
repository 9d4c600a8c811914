"""Command-line entry point: generate, train, eval, grid, analyze.

Exit codes: 0 success, 1 unexpected runtime error, 2 configuration or
input error, 3 diverged run (``train --strict`` only).
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from .config import BENCHMARK_RUNS, ConfigError, ExperimentConfig, dump_config, load_config
from .detector import load_checkpoint, save_checkpoint
from .evaluator import SWEEP_COLUMNS, run_model, threshold_sweep
from .losses import initial_loss_analytic, optimal_bias
from .scenes import Scene, dataset_digest, generate, load_dataset, save_dataset, split
from .svg import loss_curve_svgs
from .trainer import TrainingSetup, detector_config_for, is_flagged_unstable, loss_balance_report, train

logger = logging.getLogger("imbalance_lab")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
GRID_RUN_COLUMNS = ("row", "col", "seed", "status", "diverged_at", "flagged_unstable", "theta", "AP", "AP50", "AP75")
NA = "n/a"


class UsageError(Exception):
    """Bad invocation: missing inputs, refusing to overwrite and so on (exit 2)."""


# ---------------------------------------------------------------- helpers


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        f.write(text)


def _write_json(path: str, obj) -> None:
    _write(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "out", None):
        config.out = args.out
    return config


def _require_out(config: ExperimentConfig) -> str:
    if not config.out:
        raise UsageError("no output directory; pass --out or set 'out' in the config")
    return config.out


def _guard_out(path: str, marker: str, force: bool) -> None:
    if os.path.exists(os.path.join(path, marker)) and not force:
        raise UsageError(f"{os.path.join(path, marker)} exists; pass --force to overwrite")


_DATA_CACHE: Dict[Tuple[Optional[str], str], Tuple[List[Scene], str]] = {}


def load_scenes(config: ExperimentConfig, data: Optional[str]) -> Tuple[List[Scene], str]:
    """Scenes from a generated dataset directory, or regenerated from the config when ``data`` is None."""
    key = (data, json.dumps(config.dataset.to_dict(), sort_keys=True))
    if key not in _DATA_CACHE:
        if data is not None:
            if not os.path.exists(os.path.join(data, "manifest.json")):
                raise UsageError(f"no dataset at {data}; run 'generate' first")
            spec, scenes, digest = load_dataset(data)
            if spec.to_dict() != config.dataset.to_dict():
                logger.warning("dataset at %s was generated from a different spec than the config; using the files", data)
        else:
            scenes = generate(config.dataset)
            digest = dataset_digest(config.dataset, scenes)
        _DATA_CACHE.clear()
        _DATA_CACHE[key] = (scenes, digest)
    return _DATA_CACHE[key]


def parse_thetas(text: str) -> List:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        if tok == "adaptive":
            out.append(tok)
        else:
            try:
                out.append(float(tok))
            except ValueError:
                raise UsageError(f"bad threshold {tok!r}") from None
    if not out:
        raise UsageError("empty threshold list")
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def rows_to_csv(columns: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def read_table(text: str) -> Tuple[List[str], Dict[str, Dict[str, Optional[float]]]]:
    """Parse a grid table CSV back into (column labels, {row: {col: AP or None}})."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    cols = header[1:]
    table = {}
    for rec in reader:
        table[rec[0]] = {c: (None if v == NA else float(v)) for c, v in zip(cols, rec[1:])}
    return cols, table


# ---------------------------------------------------------------- core runs


def train_run(config: ExperimentConfig, scenes: Sequence[Scene], seed: Optional[int] = None):
    seed = config.seed if seed is None else seed
    train_scenes, _ = split(scenes, config.train_fraction)
    setup = TrainingSetup(train_scenes, config.anchors)
    store, record = train(
        train_scenes, config.detector, config.loss, config.sampler, config.schedule, config.anchors, seed, setup
    )
    return store, record, setup


def eval_run(store, det_config, config: ExperimentConfig, scenes, setup: TrainingSetup, thetas) -> List[dict]:
    _, eval_scenes = split(scenes, config.train_fraction)
    outputs = run_model(store, det_config, eval_scenes)
    return threshold_sweep(outputs, setup.anchors, thetas, setup.stats, config.eval, config.dataset.C)


def _stats_dict(setup: TrainingSetup) -> dict:
    s = setup.stats
    return {"N_total": s.N_total, "N_f_total": s.N_f_total, "N_ignore_total": s.N_ignore_total, "num_scenes": s.num_scenes}


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    config = _resolve_config(args)
    if args.seed is not None:
        config.dataset.seed = args.seed
    out = _require_out(config)
    scenes = generate(config.dataset)
    try:
        digest = save_dataset(config.dataset, scenes, out, force=args.force)
    except FileExistsError as exc:
        raise UsageError(str(exc)) from None
    print(f"wrote {len(scenes)} scenes to {out}  digest {digest}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _resolve_config(args)
    if args.seed is not None:
        config.seed = args.seed
    out = _require_out(config)
    _guard_out(out, "run.json", args.force)
    scenes, digest = load_scenes(config, args.data)
    store, record, setup = train_run(config, scenes)
    det_config = detector_config_for(config.detector, config.loss)
    det_config.seed = config.seed

    _write(os.path.join(out, "config.yaml"), dump_config(config))
    _write(os.path.join(out, "run.csv"), record.to_csv())
    header = record.header_dict()
    header.update(
        {
            "experiment_digest": config.digest(),
            "dataset_digest": digest,
            "flagged_unstable": is_flagged_unstable(record),
            "balance": [vars(w) for w in loss_balance_report(record)],
        }
    )
    _write_json(os.path.join(out, "run.json"), header)
    for name, svg in loss_curve_svgs(record).items():
        _write(os.path.join(out, name), svg)
    save_checkpoint(
        store,
        det_config,
        os.path.join(out, "checkpoint"),
        extra={
            "experiment": config.to_dict(),
            "dataset_digest": digest,
            "status": record.status,
            "stats": _stats_dict(setup),
        },
    )
    msg = f"{record.status}"
    if record.diverged:
        msg += f" at t={record.diverged_at}: {record.divergence_reason}"
    print(f"train {msg}; artifacts in {out}")
    if record.diverged and args.strict:
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    ckpt = args.checkpoint
    if os.path.exists(os.path.join(ckpt, "checkpoint", "manifest.json")):
        ckpt = os.path.join(ckpt, "checkpoint")
    try:
        store, det_config, manifest = load_checkpoint(ckpt)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    config = ExperimentConfig.from_dict(manifest["experiment"])
    if args.config:
        # only the eval section is taken from an explicit config
        config.eval = load_config(args.config).eval
    out = args.out or os.path.dirname(os.path.abspath(ckpt))
    scenes, digest = load_scenes(config, args.data)
    if digest != manifest.get("dataset_digest"):
        logger.warning("evaluating on dataset %s but the checkpoint was trained on %s", digest[:12], str(manifest.get("dataset_digest"))[:12])
    train_scenes, _ = split(scenes, config.train_fraction)
    setup = TrainingSetup(train_scenes, config.anchors)
    thetas = parse_thetas(args.thetas) if args.thetas else [config.eval.threshold]
    if config.eval.threshold not in thetas:
        thetas = [config.eval.threshold] + thetas
    rows = eval_run(store, det_config, config, scenes, setup, thetas)
    main_row = rows[thetas.index(config.eval.threshold)]
    report = main_row["report"].to_dict()
    report.update({"policy": main_row["policy"], "dataset_digest": digest, "checkpoint_status": manifest.get("status")})
    _write_json(os.path.join(out, "eval.json"), report)
    _write(os.path.join(out, "sweep.csv"), rows_to_csv(("policy",) + SWEEP_COLUMNS, rows))
    for r in rows:
        print(f"theta={r['theta']:.6g} ({r['policy']})  AP={100 * r['AP']:.2f}  AP50={100 * r['AP50']:.2f}  survivors={r['survivors']}")
    return EXIT_OK


def _deep_merge(a: dict, b: dict) -> dict:
    out = copy.deepcopy(a)
    for k, v in (b or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def grid_preset(name: str) -> dict:
    """Built-in grids: the (pi, w) stability table and the mechanism ablation."""
    if name == "pi-w":
        return {
            "rows": {
                "pi=0.5": {"loss": {"init_pi": None, "optimal_bias": False}},
                "pi=0.01": {"loss": {"init_pi": 0.01, "optimal_bias": False}},
                "pi=optimal": {"loss": {"init_pi": None, "optimal_bias": True}},
            },
            "cols": {
                "w=1": {"loss": {"guided": False, "fixed_w": 1.0}},
                "w=0.1": {"loss": {"guided": False, "fixed_w": 0.1}},
                "w=guided": {"loss": {"guided": True, "fixed_w": None}},
            },
            "base": {"loss": {"cls_variant": "ce"}, "eval": {"threshold": "adaptive"}},
        }
    if name == "ablation":
        # every row sets all mechanism switches so the base config cannot leak in
        def loss(variant="ce", guided=False, bias=False, pi=None):
            return {"cls_variant": variant, "guided": guided, "fixed_w": None, "optimal_bias": bias, "init_pi": pi}

        return {
            "rows": {
                "focal": BENCHMARK_RUNS["focal"],
                "guided+adaptive": {"loss": loss(guided=True, pi=0.01), "eval": {"threshold": "adaptive"}},
                "bias+adaptive": {"loss": loss(bias=True), "eval": {"threshold": "adaptive"}},
                "bias+guided": {"loss": loss(guided=True, bias=True), "eval": {"threshold": 0.05}},
                "sampling-free": BENCHMARK_RUNS["sampling-free"],
                "sampling-free+focal": {"loss": loss("focal", guided=True, bias=True), "eval": {"threshold": "adaptive"}},
            },
        }
    raise UsageError(f"unknown grid preset {name!r}; choose pi-w or ablation")


def expand_grid(spec: dict, base: ExperimentConfig) -> List[Tuple[str, str, dict]]:
    """(row, col, config dict) per cell; ``cols`` is optional and defaults to one column named AP."""
    if not isinstance(spec, dict):
        raise ConfigError("grid spec must be a mapping")
    rows = spec.get("rows") or {}
    cols = spec.get("cols") or {"AP": {}}
    if not rows:
        raise ConfigError("grid spec has no rows")
    unknown = set(spec) - {"rows", "cols", "base", "seeds"}
    if unknown:
        raise ConfigError(f"unknown grid keys {sorted(unknown)}")
    base_d = _deep_merge(base.to_dict(), spec.get("base") or {})
    cells = []
    for r, rv in rows.items():
        for c, cv in cols.items():
            d = _deep_merge(_deep_merge(base_d, rv), cv)
            ExperimentConfig.from_dict(d)  # validate early
            cells.append((str(r), str(c), d))
    return cells


def run_cell(job: Tuple[str, str, dict, int, Optional[str]]) -> dict:
    """Train and evaluate one grid cell; any failure is recorded instead of raised."""
    row, col, cfg_d, seed, data = job
    config = ExperimentConfig.from_dict(cfg_d)
    result = {"row": row, "col": col, "seed": seed}
    try:
        scenes, _ = load_scenes(config, data)
        store, record, setup = train_run(config, scenes, seed)
        result.update(status=record.status, diverged_at=record.diverged_at, flagged_unstable=is_flagged_unstable(record))
        if record.completed:
            det_config = detector_config_for(config.detector, config.loss)
            det_config.seed = seed
            sweep = eval_run(store, det_config, config, scenes, setup, [config.eval.threshold])[0]
            result.update(theta=sweep["theta"], AP=sweep["AP"], AP50=sweep["AP50"], AP75=sweep["AP75"])
    except Exception as exc:  # a failed cell must not stop the grid
        logger.warning("cell %s/%s seed %d failed: %s", row, col, seed, exc)
        result.update(status="failed", flagged_unstable=True)
    return result


def grid_table(results: Sequence[dict], rows: Sequence[str], cols: Sequence[str]) -> str:
    """Mean AP (percent) per cell over seeds; n/a when any seed did not complete."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["AP"] + list(cols))
    for r in rows:
        line = [r]
        for c in cols:
            cell = [x for x in results if x["row"] == r and x["col"] == c]
            if not cell or any(x["status"] != "completed" for x in cell):
                line.append(NA)
            else:
                line.append(f"{100.0 * float(np.mean([x['AP'] for x in cell])):.2f}")
        w.writerow(line)
    return buf.getvalue()


def cmd_grid(args) -> int:
    base = _resolve_config(args)
    out = _require_out(base)
    if args.preset:
        spec = grid_preset(args.preset)
    elif args.grid:
        try:
            with open(args.grid) as f:
                spec = yaml.safe_load(f)
        except FileNotFoundError:
            raise UsageError(f"grid spec not found: {args.grid}") from None
    else:
        raise UsageError("grid needs --grid SPEC or --preset NAME")
    if not spec:
        raise ConfigError("empty grid spec")
    _guard_out(out, "grid_table.csv", args.force)
    cells = expand_grid(spec, base)
    seeds = [args.seed] if args.seed is not None else list(spec.get("seeds") or [base.seed])

    data = args.data
    if data is None:
        # cells share one generated dataset, referenced by digest
        data = os.path.join(out, "dataset")
        if not os.path.exists(os.path.join(data, "manifest.json")) or args.force:
            save_dataset(base.dataset, generate(base.dataset), data, force=True)
    jobs = [(r, c, d, s, data) for (r, c, d) in cells for s in seeds]
    if args.parallel and args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(run_cell, jobs))
    else:
        results = [run_cell(j) for j in jobs]

    row_names = list(dict.fromkeys(r for r, _, _ in cells))
    col_names = list(dict.fromkeys(c for _, c, _ in cells))
    table = grid_table(results, row_names, col_names)
    _write(os.path.join(out, "grid_runs.csv"), rows_to_csv(GRID_RUN_COLUMNS, results))
    _write(os.path.join(out, "grid_table.csv"), table)
    _write(os.path.join(out, "grid_spec.yaml"), yaml.safe_dump(spec, sort_keys=True))
    print(table, end="")
    return EXIT_OK


def parse_loss_row(text: str, default_ratio: float, default_C: int) -> dict:
    """``variant,key=value,...`` with keys pi, alpha, gamma, w, ratio, C."""
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts or parts[0] not in ("ce", "focal"):
        raise UsageError(f"loss row must start with ce or focal: {text!r}")
    row = {"variant": parts[0], "alpha": 0.25, "gamma": 2.0, "w": 1.0, "pi": None, "ratio": default_ratio, "C": default_C}
    for p in parts[1:]:
        k, sep, v = p.partition("=")
        if not sep or k not in row or k == "variant":
            raise UsageError(f"bad loss-row field {p!r}")
        row[k] = int(v) if k == "C" else float(v)
    if row["pi"] is None:
        row["pi"] = optimal_bias(row["ratio"], 1.0, int(row["C"]))[0]
    return row


def cmd_analyze(args) -> int:
    config = _resolve_config(args)
    scenes, digest = load_scenes(config, args.data)
    train_scenes, _ = split(scenes, config.train_fraction)
    setup = TrainingSetup(train_scenes, config.anchors)
    s, alt = setup.stats, setup.stats_alt
    C = config.dataset.C
    pi, b = optimal_bias(s.N_total, s.N_f_total, C)
    pi_alt, b_alt = optimal_bias(alt.N_total, alt.N_f_total, C)
    specs = args.row or [
        "focal,pi=0.01,alpha=0.25,gamma=2,ratio=1000,C=80",
        "ce,pi=1e-5,w=0.1,ratio=1000,C=80",
        "ce",
        "focal,pi=0.01",
    ]
    table = []
    for text in specs:
        r = parse_loss_row(text, s.ratio, C)
        r["L_initial"] = initial_loss_analytic(r["variant"], r["pi"], r["ratio"], int(r["C"]), alpha=r["alpha"], gamma=r["gamma"], w=r["w"])
        table.append(r)
    report = {
        "dataset_digest": digest,
        "train_scenes": len(train_scenes),
        "anchors_per_scene": setup.anchors.N,
        "count_ignore_in_n": config.anchors.count_ignore_in_n,
        "N": s.N_total,
        "N_f": s.N_f_total,
        "N_ignore": s.N_ignore_total,
        "ratio_N_over_Nf": s.ratio,
        "optimal_pi": pi,
        "optimal_bias": b,
        "adaptive_theta": s.fg_fraction,
        "alt_convention": {"N": alt.N_total, "ratio_N_over_Nf": alt.ratio, "optimal_pi": pi_alt, "optimal_bias": b_alt, "adaptive_theta": alt.fg_fraction},
        "initial_loss_table": table,
    }
    print(f"N={s.N_total}  N_f={s.N_f_total}  N/N_f={s.ratio:.4f}  ignore={s.N_ignore_total}")
    print(f"optimal pi={pi:.6g}  b={b:.6f}  adaptive theta={s.fg_fraction:.6g}")
    print(f"(ignore anchors {'excluded' if config.anchors.count_ignore_in_n else 'included'}: pi={pi_alt:.6g}, theta={alt.fg_fraction:.6g})")
    print("variant  pi  alpha  gamma  w  ratio  C  L_initial")
    for r in table:
        print(f"{r['variant']}  {r['pi']:.6g}  {r['alpha']:g}  {r['gamma']:g}  {r['w']:g}  {r['ratio']:.6g}  {r['C']}  {r['L_initial']:.4f}")
    if config.out:
        _write_json(os.path.join(config.out, "analysis.json"), report)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imbalance-lab", description="Foreground-background imbalance experiments on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="experiment config YAML")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="run seed (dataset seed for generate)")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if data:
            sp.add_argument("--data", help="dataset directory from 'generate' (default: regenerate from config)")
        return sp

    common(sub.add_parser("generate", help="write the synthetic dataset"), data=False).set_defaults(func=cmd_generate)
    t = common(sub.add_parser("train", help="train one configuration"))
    t.add_argument("--strict", action="store_true", help="exit 3 when the run diverges")
    t.set_defaults(func=cmd_train)
    e = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    e.add_argument("--checkpoint", help="checkpoint directory or train output directory")
    e.add_argument("--thetas", help="comma list of thresholds, 'adaptive' allowed, e.g. 0,0.05,adaptive")
    e.set_defaults(func=cmd_eval)
    g = common(sub.add_parser("grid", help="run a grid of configurations"))
    g.add_argument("--grid", help="grid spec YAML with rows, optional cols, base and seeds")
    g.add_argument("--preset", help="built-in grid: pi-w or ablation")
    g.add_argument("--parallel", type=int, default=1, help="cells run concurrently")
    g.set_defaults(func=cmd_grid)
    a = common(sub.add_parser("analyze", help="imbalance statistics and analytic initial losses"))
    a.add_argument("--row", action="append", help="loss row 'ce|focal,pi=..,alpha=..,gamma=..,w=..,ratio=..,C=..'")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
