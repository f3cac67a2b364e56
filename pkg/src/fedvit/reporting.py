"""CSV and JSON emission for experiment results.

All CSV files use a header row, comma separation, LF line endings and
shortest round-trip decimal floats, so reruns of the same configuration
are byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path
from collections.abc import Sequence

from .data import HeterogeneityStats
from .federation import RoundReport

__all__ = [
    "ROUNDS_HEADER",
    "SWEEP_HEADER",
    "PARTITION_HEADER",
    "write_rounds_csv",
    "write_summary_json",
    "write_sweep_summary",
    "write_partition_stats",
]

ROUNDS_HEADER = (
    "round,client_id,n_train,n_test,local_test_acc,global_bench_acc,mean_loss,"
    "acc_min,acc_mean,acc_max,acc_spread,strategy,alpha,seed"
)
SWEEP_HEADER = (
    "strategy,alpha,seed,round,acc_min,acc_mean,acc_max,acc_spread,"
    "global_bench_acc,mean_loss"
)
PARTITION_HEADER = "client,class,count,frequency"


def _f(x: float) -> str:
    return repr(float(x))


def _round_rows(report: RoundReport, strategy: str, alpha: float, seed: int) -> list[str]:
    fairness = report.fairness
    stats = [_f(fairness.min_acc), _f(fairness.mean_weighted), _f(fairness.max_acc), _f(fairness.spread)]
    tail = [strategy, _f(alpha), str(seed)]
    rows = []
    for local, bench, n_train in zip(
        report.client_local, report.client_benchmark, report.train_sizes
    ):
        rows.append(",".join(
            [str(report.round_index), str(local.client_id), str(n_train), str(local.total),
             _f(local.accuracy), _f(bench.accuracy), _f(local.mean_loss)]
            + stats + tail
        ))
    rows.append(",".join(
        [str(report.round_index), "GLOBAL", str(sum(report.train_sizes)),
         str(report.global_benchmark.total), _f(fairness.mean_weighted),
         _f(report.global_benchmark.accuracy), _f(report.global_mean_loss)]
        + stats + tail
    ))
    return rows


def write_rounds_csv(
    path: str | Path,
    reports: Sequence[RoundReport],
    strategy: str,
    alpha: float,
    seed: int,
) -> None:
    """One row per (round, client) plus a GLOBAL summary row per round."""
    lines = [ROUNDS_HEADER]
    for report in reports:
        lines.extend(_round_rows(report, strategy, alpha, seed))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def write_summary_json(
    path: str | Path,
    reports: Sequence[RoundReport],
    strategy: str,
    alpha: float,
    seed: int,
) -> None:
    final = reports[-1]
    doc = {
        "strategy": strategy,
        "alpha": alpha,
        "seed": seed,
        "rounds": final.round_index,
        "clients": len(final.client_local),
        "final": {
            "acc_min": final.fairness.min_acc,
            "acc_mean_weighted": final.fairness.mean_weighted,
            "acc_mean_unweighted": final.fairness.mean_unweighted,
            "acc_max": final.fairness.max_acc,
            "acc_spread": final.fairness.spread,
            "global_bench_acc": final.global_benchmark.accuracy,
            "global_mean_loss": final.global_mean_loss,
        },
        "wall_time_total": sum(r.wall_time for r in reports),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def sweep_rows(
    reports: Sequence[RoundReport], strategy: str, alpha: float, seed: int
) -> list[str]:
    rows = []
    for report in reports:
        fairness = report.fairness
        rows.append(",".join([
            strategy, _f(alpha), str(seed), str(report.round_index),
            _f(fairness.min_acc), _f(fairness.mean_weighted), _f(fairness.max_acc),
            _f(fairness.spread), _f(report.global_benchmark.accuracy),
            _f(report.global_mean_loss),
        ]))
    return rows


def write_sweep_summary(path: str | Path, rows: Sequence[str]) -> None:
    Path(path).write_text(
        "\n".join([SWEEP_HEADER, *rows]) + "\n", encoding="utf-8", newline="\n"
    )


def write_partition_stats(path: str | Path, stats: HeterogeneityStats) -> None:
    """Per-(client, class) counts and within-client frequencies."""
    lines = [PARTITION_HEADER]
    clients, classes = stats.counts.shape
    for client in range(clients):
        for cls in range(classes):
            lines.append(",".join([
                str(client), str(cls), str(int(stats.counts[client, cls])),
                _f(stats.frequencies[client, cls]),
            ]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
