"""End-to-end experiment orchestration: data, partition, model, round loop.

Pipeline per run: build the dataset, carve a class-stratified benchmark
set off the pool, split the rest across clients with the Dirichlet
partitioner, stratify each client shard into train/test, initialise the
model, evaluate it (round 0), then run the configured number of rounds.
Everything is a pure function of the configuration, so two runs of the
same config produce identical reports.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .config import ExperimentConfig
from .data import Dataset, dirichlet_partition, generate_synthetic, load_idx, train_test_split
from .federation import ClientState, RoundReport, ServerState, evaluate_round, run_round
from .model import init_model

__all__ = [
    "ExperimentResult",
    "run_experiment",
    "run_experiment_detailed",
    "build_dataset",
    "build_partition",
    "build_clients",
]

# Fixed tags keep the derived split seeds disjoint from client training streams.
_BENCHMARK_TAG = 101
_CLIENT_SPLIT_TAG = 202


@dataclass
class ExperimentResult:
    reports: list[RoundReport]
    server: ServerState
    clients: list[ClientState]
    benchmark: Dataset


def build_dataset(config: ExperimentConfig) -> Dataset:
    if config.synthetic is not None:
        return generate_synthetic(config.synthetic)
    return load_idx(config.idx_images, config.idx_labels)


def _derived_seed(root: int, *tags: int) -> int:
    return int(np.random.SeedSequence((root, *tags)).generate_state(1)[0])


def _split_client(data: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Per-client stratified split that tolerates singleton classes.

    Lone-class samples land on the train side; if that empties the test
    side, the last train sample moves over so both sides stay usable.
    """
    train, test = train_test_split(data, fraction, seed, strict=False)
    if len(test) == 0:
        mover = len(train) - 1
        keep = list(range(mover))
        test = train.subset([mover])
        train = train.subset(keep)
    return train, test


def build_partition(config: ExperimentConfig) -> tuple[Dataset, Dataset, list[Dataset]]:
    """(client pool, benchmark set, per-client shards) for a configuration.

    The benchmark is carved off before partitioning; the per-client minimum
    is raised to 2 so every shard supports a train/test split.
    """
    data = build_dataset(config)
    pool, benchmark = train_test_split(
        data, config.benchmark_fraction, _derived_seed(config.seed, _BENCHMARK_TAG)
    )
    spec = config.partition
    if spec.min_per_client < 2:
        spec = replace(spec, min_per_client=2)
    return pool, benchmark, dirichlet_partition(pool, spec)


def build_clients(shards: list[Dataset], config: ExperimentConfig) -> list[ClientState]:
    clients = []
    for i, shard in enumerate(shards):
        train, test = _split_client(
            shard, config.test_fraction, _derived_seed(config.seed, _CLIENT_SPLIT_TAG, i)
        )
        clients.append(
            ClientState(id=i, train_data=train, test_data=test, seed_root=config.seed)
        )
    return clients


def run_experiment_detailed(config: ExperimentConfig) -> ExperimentResult:
    _, benchmark, shards = build_partition(config)
    clients = build_clients(shards, config)

    initial = init_model(config.model, config.seed)
    for client in clients:
        client.weights = initial
    server = ServerState(initial, 0)

    started = time.perf_counter()
    first = evaluate_round(
        0, initial, clients, {}, config.strategy, config.model, benchmark, started
    )
    reports = [first]
    for _ in range(config.rounds):
        server, report = run_round(server, clients, config.strategy, config.model, benchmark)
        reports.append(report)
    return ExperimentResult(reports, server, clients, benchmark)


def run_experiment(config: ExperimentConfig) -> list[RoundReport]:
    """Round-by-round metric series for one configuration (round 0 included)."""
    return run_experiment_detailed(config).reports
