"""``contilora`` command line: run a grid, analyze checkpoints, report tables.

Exit codes: 0 success, 1 a run failed (partial results kept), 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .contlearn import STRATEGIES, TrainConfig, run_sequence
from .errors import ConfigError, ContiLoraError
from .evalkit import (
    compute_metrics,
    energy_curve_per_layer,
    lora_similarity_per_layer,
    reconstruction_curve_per_layer,
)
from .gradnet import load_network
from .taskgen import export_suite, load_suite, make_suite

log = logging.getLogger("contilora")

SCHEMA_VERSION = 1
SEED_ENV = "CONTILORA_SEED"
EXIT_OK, EXIT_RUN_FAILURE, EXIT_USAGE = 0, 1, 2

_TOP_KEYS = {"schema_version", "suite", "n_tasks", "task_order", "strategies", "seeds",
             "output_dir", "train", "suite_options", "from_dataset"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"strategy", "seed"}


class UsageError(ContiLoraError):
    pass


@dataclass
class ExperimentConfig:
    suite: str = "diffusion"
    n_tasks: int = 4
    task_order: list = field(default_factory=lambda: ["default"])
    strategies: list = field(default_factory=lambda: ["aod_svd"])
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    train: dict = field(default_factory=dict)
    suite_options: dict = field(default_factory=dict)
    from_dataset: str | None = None

    def validate(self) -> None:
        if self.suite not in ("regression", "diffusion"):
            raise ConfigError(f"suite: unknown suite {self.suite!r}")
        if self.from_dataset is None and int(self.n_tasks) < 2:
            raise ConfigError("n_tasks: a generated suite needs at least two tasks")
        if not self.strategies:
            raise ConfigError("strategies: must be non-empty")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ConfigError(f"strategies: unknown strategy {s!r}")
        if not self.seeds:
            raise ConfigError("seeds: must be non-empty")
        unknown = set(self.train) - _TRAIN_KEYS
        if unknown:
            raise ConfigError(f"train: unknown field(s) {', '.join(sorted(unknown))}")
        TrainConfig(**self.train)
        for spec in self.task_order:
            resolve_order(spec, self.n_tasks)


# -- config ---------------------------------------------------------------------


def load_config_file(path: str | Path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{p}: YAML parse error{where}: {getattr(exc, 'problem', exc)}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{p}: schema_version must be {SCHEMA_VERSION}, got {version!r}")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{p}: unknown field(s) {', '.join(sorted(unknown))}")
    return data


def _as_order_list(value) -> list:
    # a flat list of ints is one permutation; anything else lists several orders
    if isinstance(value, (str, int)):
        return [value]
    if isinstance(value, list) and value and all(isinstance(v, int) for v in value):
        return [value]
    return list(value)


def build_config(file_data: dict, args: argparse.Namespace, env=os.environ) -> ExperimentConfig:
    """Merge config file, ``CONTILORA_SEED`` and flags (in increasing precedence)."""
    cfg = ExperimentConfig()
    for key in ("suite", "n_tasks", "strategies", "seeds", "output_dir", "from_dataset"):
        if key in file_data:
            setattr(cfg, key, file_data[key])
    if "task_order" in file_data:
        cfg.task_order = _as_order_list(file_data["task_order"])
    cfg.train = dict(file_data.get("train") or {})
    cfg.suite_options = dict(file_data.get("suite_options") or {})
    if env.get(SEED_ENV) not in (None, ""):
        try:
            cfg.seeds = [int(env[SEED_ENV])]
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    if args.suite is not None:
        cfg.suite = args.suite
    if args.n_tasks is not None:
        cfg.n_tasks = args.n_tasks
    if args.strategies is not None:
        cfg.strategies = _split(args.strategies)
    if args.seeds is not None:
        cfg.seeds = [int(s) for s in _split(args.seeds)]
    if args.task_order is not None:
        cfg.task_order = [_parse_order_flag(s) for s in args.task_order]
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir
    if args.from_dataset is not None:
        cfg.from_dataset = args.from_dataset
    if cfg.from_dataset is not None:
        manifest = Path(cfg.from_dataset) / "manifest.json"
        if not manifest.is_file():
            raise UsageError(f"dataset manifest not found: {manifest}")
        stored = json.loads(manifest.read_text())
        if args.n_tasks is None and "n_tasks" not in file_data:
            cfg.n_tasks = len(stored["tasks"])
        elif int(cfg.n_tasks) != len(stored["tasks"]):
            raise ConfigError(f"n_tasks: {cfg.n_tasks} but {cfg.from_dataset} holds {len(stored['tasks'])} tasks")
        cfg.suite = stored["kind"]
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            cfg.train[key] = value
    if isinstance(cfg.strategies, str):
        cfg.strategies = _split(cfg.strategies)
    cfg.seeds = [int(s) for s in (cfg.seeds if isinstance(cfg.seeds, list) else [cfg.seeds])]
    cfg.validate()
    return cfg


def _split(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def _parse_order_flag(text: str):
    if text and text[0].isdigit():
        return [int(v) for v in _split(text)]
    return text


def resolve_order(spec, n: int) -> tuple[str, list[int]]:
    """(label, permutation) for an order spec."""
    if spec == "default":
        return "default", list(range(n))
    if spec == "reversed":
        return "reversed", list(range(n - 1, -1, -1))
    if isinstance(spec, str) and spec.startswith("shuffled:"):
        try:
            s = int(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"task_order: bad shuffle seed in {spec!r}") from None
        return f"shuffled-{s}", [int(i) for i in np.random.default_rng(s).permutation(n)]
    if isinstance(spec, list):
        if sorted(spec) != list(range(n)):
            raise ConfigError(f"task_order: {spec} is not a permutation of 0..{n - 1}")
        return "perm-" + "-".join(str(i) for i in spec), [int(i) for i in spec]
    raise ConfigError(f"task_order: unrecognised order {spec!r}")


# -- run --------------------------------------------------------------------------


def _cell_dir(root: Path, strategy: str, seed: int, label: str, many_orders: bool) -> Path:
    d = root / "run" / strategy / str(seed)
    return d / f"order_{label}" if many_orders else d


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def run_cell(cell: dict) -> dict:
    """Train one (strategy, seed, order) cell and write its artifacts."""
    out = Path(cell["dir"])
    out.mkdir(parents=True, exist_ok=True)
    record = {k: cell[k] for k in ("strategy", "seed", "order", "permutation")}
    record["dir"] = str(Path(cell["dir"]).relative_to(cell["root"]))
    try:
        if cell["from_dataset"]:
            suite = load_suite(cell["from_dataset"])
        else:
            suite = make_suite(cell["suite"], cell["seed"], cell["n_tasks"], **cell["suite_options"])
        if len(suite) != len(cell["permutation"]):
            raise ConfigError(f"dataset has {len(suite)} tasks, order expects {len(cell['permutation'])}")
        suite = suite.reordered(cell["permutation"])
        train = TrainConfig(**{**cell["train"], "strategy": cell["strategy"], "seed": cell["seed"]})
        (out / "config.json").write_text(_dump(dataclasses.asdict(train)))
        pm, _ = run_sequence(suite, train, checkpoint_root=out)
    except Exception as exc:  # a failed cell must not take the grid down
        record.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        (out / "metrics.json").write_text(_dump(record))
        return record
    (out / "perf_matrix.csv").write_text(pm.to_csv())
    record.update(status="ok", task_names=pm.task_names, metrics=compute_metrics(pm).to_dict())
    (out / "metrics.json").write_text(_dump(record))
    return record


def cmd_run(args: argparse.Namespace) -> int:
    file_data = load_config_file(args.config) if args.config else {}
    cfg = build_config(file_data, args)
    root = Path(cfg.output_dir)
    orders = [resolve_order(o, cfg.n_tasks) for o in cfg.task_order]
    many = len(orders) > 1
    cells = []
    for strategy in cfg.strategies:
        for seed in cfg.seeds:
            for label, perm in orders:
                d = _cell_dir(root, strategy, seed, label, many)
                if d.exists() and any(d.iterdir()):
                    if not args.force:
                        raise UsageError(f"{d} already holds results; pass --force to overwrite")
                    shutil.rmtree(d)
                cells.append({"dir": str(d), "root": str(root), "strategy": strategy, "seed": seed,
                              "order": label, "permutation": perm, "suite": cfg.suite,
                              "n_tasks": cfg.n_tasks, "suite_options": cfg.suite_options,
                              "train": cfg.train, "from_dataset": cfg.from_dataset})
    root.mkdir(parents=True, exist_ok=True)
    jobs = max(1, int(args.jobs))
    if jobs == 1 or len(cells) == 1:
        records = [run_cell(c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(run_cell, cells))
    for r in records:
        if r["status"] == "ok":
            m = r["metrics"]
            log.info("%s seed=%s order=%s last=%.5f avg=%.5f bwt=%.5f",
                     r["strategy"], r["seed"], r["order"], m["last"], m["avg"], m["bwt"])
        else:
            log.error("%s seed=%s order=%s failed: %s", r["strategy"], r["seed"], r["order"], r["error"])
    summary = {"schema_version": SCHEMA_VERSION, "suite": cfg.suite, "n_tasks": cfg.n_tasks, "cells": records}
    (root / "metrics.json").write_text(_dump(summary))
    return EXIT_OK if all(r["status"] == "ok" for r in records) else EXIT_RUN_FAILURE


# -- analyze ------------------------------------------------------------------------


def _cell_dirs(run_dir: Path) -> list[Path]:
    return sorted({p.parent.parent for p in run_dir.rglob("task_0/manifest.json")}, key=str)


def _load_adapters(cell: Path):
    """Most recently frozen adapter of every layer, one list per checkpoint."""
    ckpts = sorted(cell.glob("task_*/manifest.json"), key=lambda p: int(p.parent.name.split("_")[1]))
    adapters = []
    for m in ckpts:
        _, params, _ = load_network(m.parent)
        adapters.append([p.adapters.frozen[-1] for p in params if p.adapters.frozen])
    return adapters


def _matrix_csv(m: np.ndarray, header: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + header)
    for name, row in zip(header, m):
        w.writerow([name] + [repr(float(v)) for v in row])
    return buf.getvalue()


def _curve_csv(per_layer: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "mean"] + [f"layer{l}" for l in range(per_layer.shape[1])])
    for k, row in enumerate(per_layer, start=1):
        w.writerow([k, repr(float(row.mean()))] + [repr(float(v)) for v in row])
    return buf.getvalue()


def analyze_cell(cell: Path) -> None:
    adapters = _load_adapters(cell)
    if not adapters or not adapters[0]:
        raise UsageError(f"{cell}: no adapter checkpoints")
    config = json.loads((cell / "config.json").read_text()) if (cell / "config.json").exists() else {}
    r = int(config.get("lora_rank", adapters[0][0].rank))
    names = [f"task_{k}" for k in range(len(adapters))]
    out = cell / "analysis"
    out.mkdir(exist_ok=True)
    for which in ("A", "B"):
        per_layer = lora_similarity_per_layer(adapters, which)
        (out / f"similarity_{which}.csv").write_text(_matrix_csv(per_layer.mean(axis=0), names))
        for l, m in enumerate(per_layer):
            (out / f"similarity_{which}_layer{l}.csv").write_text(_matrix_csv(m, names))
    (out / "energy_curve.csv").write_text(_curve_csv(energy_curve_per_layer(adapters, r)))
    (out / "reconstruction_curve.csv").write_text(_curve_csv(reconstruction_curve_per_layer(adapters, r)))


def cmd_analyze(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"run directory not found: {run_dir}")
    cells = _cell_dirs(run_dir)
    if not cells:
        raise UsageError(f"{run_dir}: no checkpoints found")
    for cell in cells:
        analyze_cell(cell)
        log.info("analyzed %s", cell)
    return EXIT_OK


# -- report -------------------------------------------------------------------------


def _collect(run_dirs) -> dict:
    groups: dict[tuple[str, str], list[dict]] = {}
    for d in run_dirs:
        path = Path(d) / "metrics.json"
        if not path.is_file():
            raise UsageError(f"no metrics.json in {d}")
        data = json.loads(path.read_text())
        if data.get("schema_version") != SCHEMA_VERSION or "cells" not in data:
            raise ConfigError(f"{path}: unsupported metrics schema")
        for cell in data["cells"]:
            if cell.get("status") != "ok":
                continue
            groups.setdefault((cell["strategy"], cell["order"]), []).append(cell)
    if not groups:
        raise UsageError("no successful runs to report")
    return groups


def _mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def report_rows(run_dirs) -> tuple[list[str], list[list]]:
    groups = _collect(run_dirs)
    names = None
    rows = []
    for (strategy, order), cells in sorted(groups.items()):
        for c in cells:
            if names is None:
                names = list(c["task_names"])
            elif sorted(c["task_names"]) != sorted(names):
                raise ConfigError(f"task mismatch across runs: {c['task_names']} vs {names}")
        row = [strategy, order, len(cells)]
        for key in ("last", "avg", "bwt"):
            row.extend(_mean_std([c["metrics"][key] for c in cells]))
        # per-task columns are keyed by task name, so different orders line up
        for name in names:
            row.extend(_mean_std([c["metrics"]["per_task_last"][c["task_names"].index(name)] for c in cells]))
        rows.append(row)
    header = ["strategy", "order", "n_seeds"]
    for key in ["last", "avg", "bwt"] + [f"last_{n}" for n in names]:
        header += [f"{key}_mean", f"{key}_std"]
    return header, rows


def _text_table(header, rows) -> str:
    cols = header[:3] + [h[:-5] for h in header[3::2]]
    body = []
    for row in rows:
        cells = [str(v) for v in row[:3]]
        cells += [f"{m:.4f} ± {s:.4f}" for m, s in zip(row[3::2], row[4::2])]
        body.append(cells)
    widths = [max(len(c), *(len(r[i]) for r in body)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in body]
    return "\n".join(lines) + "\n"


def cmd_report(args: argparse.Namespace) -> int:
    header, rows = report_rows(args.run_dirs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, (str, int)) else repr(v) for v in row])
    out = Path(args.csv) if args.csv else Path(args.run_dirs[0]) / "report.csv"
    out.write_text(buf.getvalue())
    sys.stdout.write(_text_table(header, rows))
    return EXIT_OK


# -- export -------------------------------------------------------------------------


def cmd_export(args: argparse.Namespace) -> int:
    options = json.loads(args.suite_options) if args.suite_options else {}
    out = Path(args.dest)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty; pass --force to overwrite")
    export_suite(make_suite(args.suite, args.seed, args.n_tasks, **options), out)
    return EXIT_OK


# -- entry point --------------------------------------------------------------------

_TRAIN_FLAGS = {
    "epochs": "epochs_per_task",
    "lr": "learning_rate",
    "rank": "lora_rank",
    "stage2_fraction": "stage2_fraction",
    "lambda_orth": "lambda_orth",
    "rehearsal_fraction": "rehearsal_fraction",
    "batch_size": "batch_size",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="contilora", description="Continual LoRA experiments with interference-aware orthogonality.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="train the strategy x seed x order grid")
    run.add_argument("config", nargs="?", help="YAML experiment config")
    run.add_argument("--suite", choices=["regression", "diffusion"])
    run.add_argument("--n-tasks", type=int)
    run.add_argument("--strategies", help="comma-separated strategy names")
    run.add_argument("--seeds", help="comma-separated integer seeds")
    run.add_argument("--task-order", action="append",
                     help="default, reversed, shuffled:<seed> or i,j,k,... (repeatable)")
    run.add_argument("--output-dir")
    run.add_argument("--from-dataset", help="replay an exported suite directory")
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--force", action="store_true", help="overwrite existing cell directories")
    run.add_argument("--epochs", type=int)
    run.add_argument("--lr", type=float)
    run.add_argument("--rank", type=int)
    run.add_argument("--stage2-fraction", type=float)
    run.add_argument("--lambda-orth", type=float)
    run.add_argument("--rehearsal-fraction", type=float)
    run.add_argument("--batch-size", type=int)
    run.set_defaults(func=cmd_run)

    analyze = sub.add_parser("analyze", help="write similarity and compression curves under analysis/")
    analyze.add_argument("run_dir")
    analyze.set_defaults(func=cmd_analyze)

    report = sub.add_parser("report", help="aggregate metrics over seeds")
    report.add_argument("run_dirs", nargs="+")
    report.add_argument("--csv", help="where to write the CSV table (default: <first run dir>/report.csv)")
    report.set_defaults(func=cmd_report)

    export = sub.add_parser("export", help="write a task suite to disk for --from-dataset")
    export.add_argument("dest")
    export.add_argument("--suite", choices=["regression", "diffusion"], default="diffusion")
    export.add_argument("--n-tasks", type=int, default=4)
    export.add_argument("--seed", type=int, default=0)
    export.add_argument("--suite-options", help="JSON object of suite keyword arguments")
    export.add_argument("--force", action="store_true")
    export.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"contilora: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContiLoraError, ArithmeticError, ValueError, OSError) as exc:
        print(f"contilora: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILURE
