"""Command-line entry points: run, sweep, gradcheck, partition-stats.

Exit codes: 0 success, 1 failed gradient check, 2 invalid configuration
(the message names the offending field), 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .autodiff import ParamSet
from .config import ConfigError, ExperimentConfig, load_config, parse_config, parse_sweep, sweep_cell
from .data import heterogeneity_stats
from .experiment import build_dataset, build_partition, run_experiment_detailed
from .federation import StrategyKind
from .gradcheck import GradCheckReport, check_model_gradients
from .model import parameter_shapes, save_checkpoint
from .reporting import (
    sweep_rows,
    write_partition_stats,
    write_rounds_csv,
    write_summary_json,
    write_sweep_summary,
)

__all__ = ["main"]

CHECK_POINT_STD = 0.25
CHECK_BATCH = 8
GRADCHECK_THRESHOLD = 1e-6


def _fail(code: int, message: str) -> int:
    print(message, file=sys.stderr)
    return code


def _resolve_out(args, config: ExperimentConfig, default: str) -> Path:
    out = args.out or config.output_dir or default
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load(args) -> tuple[dict, ExperimentConfig]:
    raw, config = load_config(args.config)
    if args.seed is not None:
        raw = json.loads(json.dumps(raw))
        raw["seed"] = args.seed
        config = parse_config(raw)
    return raw, config


def cmd_run(args) -> int:
    _, config = _load(args)
    out = _resolve_out(args, config, "out")
    result = run_experiment_detailed(config)
    strategy = config.strategy.kind.value
    alpha = config.partition.alpha
    write_rounds_csv(out / "rounds.csv", result.reports, strategy, alpha, config.seed)
    write_summary_json(out / "summary.json", result.reports, strategy, alpha, config.seed)
    save_checkpoint(out / "checkpoint.json", config.model, result.server.global_weights)
    print(f"wrote {out / 'rounds.csv'} ({result.server.round} rounds)")
    return 0


def _run_cell(raw: dict, kind: StrategyKind, alpha: float, seed: int, cell_dir: Path):
    config = sweep_cell(raw, kind, alpha, seed)
    cell_dir.mkdir(parents=True, exist_ok=True)
    result = run_experiment_detailed(config)
    write_rounds_csv(cell_dir / "rounds.csv", result.reports, kind.value, alpha, seed)
    write_summary_json(cell_dir / "summary.json", result.reports, kind.value, alpha, seed)
    save_checkpoint(cell_dir / "checkpoint.json", config.model, result.server.global_weights)
    return sweep_rows(result.reports, kind.value, alpha, seed)


def cmd_sweep(args) -> int:
    raw, base = _load(args)
    spec = parse_sweep(raw, base)
    out = _resolve_out(args, base, "sweep_out")
    jobs = args.jobs or int(os.environ.get("FEDVIT_JOBS", "1"))

    cells = [
        (kind, alpha, seed)
        for kind in spec.strategies
        for alpha in spec.alphas
        for seed in spec.seeds
    ]
    names = [f"{kind.value}_alpha{alpha:g}_seed{seed}" for kind, alpha, seed in cells]

    def work(cell, name):
        kind, alpha, seed = cell
        try:
            return _run_cell(raw, kind, alpha, seed, out / name), None
        except Exception as exc:  # a failed cell must not abort the others
            return None, f"{name}: {exc}"

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(work, cells, names))
    else:
        outcomes = [work(cell, name) for cell, name in zip(cells, names)]

    rows: list[str] = []
    failures: list[str] = []
    for (cell_rows, error), name in zip(outcomes, names):
        if error is not None:
            failures.append(error)
            print(f"cell failed: {error}", file=sys.stderr)
        else:
            rows.extend(cell_rows)
    write_sweep_summary(out / "sweep_summary.csv", rows)
    if failures:
        (out / "failures.txt").write_text("\n".join(failures) + "\n", encoding="utf-8")
    print(f"sweep: {len(cells) - len(failures)}/{len(cells)} cells ok, summary in {out}")
    return 0 if not failures else 3


def _sample_check_point(config: ExperimentConfig) -> ParamSet:
    """Random check point for the gradient check; larger than a training
    init so activations sit away from kinks and saturation."""
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 915)))
    std = CHECK_POINT_STD
    arrays = {}
    for name, shape in parameter_shapes(config.model).items():
        w = rng.normal(0.0, std, size=shape)
        bad = np.abs(w) > 2 * std
        while bad.any():
            w[bad] = rng.normal(0.0, std, size=int(bad.sum()))
            bad = np.abs(w) > 2 * std
        arrays[name] = w
    return ParamSet.from_arrays(arrays)


def run_gradient_check(config: ExperimentConfig, corrupt: str | None = None) -> GradCheckReport:
    """Check the configured model's local-objective gradient at a random point.

    ``corrupt`` perturbs one analytic gradient entry (test hook for the
    failure path).
    """
    data = build_dataset(config)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 916)))
    picks = rng.choice(len(data), size=min(CHECK_BATCH, len(data)), replace=False)
    images = [data.images[i] for i in picks]
    labels = [data.labels[i] for i in picks]
    return check_model_gradients(
        config.model,
        _sample_check_point(config),
        images,
        labels,
        h=1e-5,
        coords_per_tensor=100,
        rng=np.random.default_rng(np.random.SeedSequence((config.seed, 917))),
        corrupt=corrupt,
    )


def cmd_gradcheck(args) -> int:
    _, config = _load(args)
    report = run_gradient_check(config, corrupt=args.corrupt)
    worst = report.worst
    print(
        f"gradcheck: max relative error {report.max_rel_error:.3e} over "
        f"{report.coordinates_checked} coordinates "
        f"({report.coordinates_resampled} kink-contaminated draws replaced) "
        f"in {report.elapsed:.1f}s"
    )
    if report.passed(GRADCHECK_THRESHOLD):
        return 0
    print(
        f"gradcheck FAILED at {worst.name}[{worst.index}]: "
        f"analytic {worst.analytic:.6e} vs numeric {worst.numeric:.6e} "
        f"(relative error {worst.rel_error:.3e} > {GRADCHECK_THRESHOLD:g})",
        file=sys.stderr,
    )
    return 1


def cmd_partition_stats(args) -> int:
    _, config = _load(args)
    out = _resolve_out(args, config, "out")
    _, _, shards = build_partition(config)
    stats = heterogeneity_stats(shards)
    write_partition_stats(out / "partition_stats.csv", stats)
    sizes = [len(s) for s in shards]
    with open(out / "partition_summary.json", "w", encoding="utf-8") as f:
        json.dump({"dispersion": stats.dispersion, "client_sizes": sizes}, f, indent=2)
        f.write("\n")
    for client, shard in enumerate(shards):
        hist = " ".join(str(int(c)) for c in stats.counts[client])
        print(f"client {client}: {len(shard)} samples, per-class [{hist}]")
    print(f"dispersion: {stats.dispersion!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedvit",
        description="Federated training simulator for a miniature vision transformer",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    specs = (
        ("run", cmd_run, "run one experiment and write rounds.csv / summary.json"),
        ("sweep", cmd_sweep, "run a strategy/alpha/seed grid of experiments"),
        ("gradcheck", cmd_gradcheck, "verify model gradients against finite differences"),
        ("partition-stats", cmd_partition_stats, "report per-client class histograms"),
    )
    for name, func, help_text in specs:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the JSON configuration")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the root seed")
        p.add_argument("--jobs", type=int, default=None,
                       help="parallel sweep cells (or env FEDVIT_JOBS)")
        if name == "gradcheck":
            p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(2, f"invalid config: {exc}")
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        return _fail(3, f"error: {exc}")


if __name__ == "__main__":
    sys.exit(main())
