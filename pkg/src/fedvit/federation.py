"""The federated state machine: strategies, local training, aggregation, rounds.

Five strategies share one round loop:

* ``LOCAL``   - clients keep training their own weights; nothing is aggregated.
* ``FEDAVG``  - clients start from the broadcast weights; the server averages.
* ``FEDPROX`` - FEDAVG plus a proximal pull ``(mu/2) ||w - w_global||^2`` over
  every parameter of the local objective.
* ``FEDMHA``  - the proximal pull restricted to the encoder's attention
  projections and MLP weights (the ``aligned_names`` patterns).
* ``FEDBN``   - FEDAVG, except parameters matching ``excluded_names`` (the
  normalisation affines) stay client-local and are never aggregated.

Determinism contract: every run is a pure function of (inputs, seeds).
Client shuffling draws from a stream derived by seeding a generator with
the tuple ``(seed_root, client_id, round_index)``, and aggregation folds
updates in ascending client-id order, so results do not depend on client
list order or on any parallel execution of the independent client steps.
"""

from __future__ import annotations

import fnmatch
import time
from dataclasses import dataclass, field
from enum import Enum
from collections.abc import Iterable, Sequence

import numpy as np

from .autodiff import GradTape, ParamSet, Tensor, cross_entropy, sgd_step
from .data import Dataset
from .metrics import ClientMetrics, FairnessSummary, accuracy, fairness_summary, weighted_mean
from .model import ViTConfig, forward_batch

__all__ = [
    "StrategyKind",
    "StrategyConfig",
    "StrategyError",
    "ClientState",
    "ServerState",
    "ClientUpdate",
    "RoundReport",
    "match_names",
    "alignment_penalty",
    "local_objective_grad",
    "local_train",
    "aggregate",
    "run_round",
    "DEFAULT_ALIGNED_NAMES",
    "DEFAULT_EXCLUDED_NAMES",
]

DEFAULT_ALIGNED_NAMES = ("block*.wq", "block*.wk", "block*.wv", "block*.mlp_*")
DEFAULT_EXCLUDED_NAMES = ("block*.ln*",)


class StrategyError(Exception):
    """A strategy's name patterns or configuration cannot be applied."""


class StrategyKind(str, Enum):
    LOCAL = "LOCAL"
    FEDAVG = "FEDAVG"
    FEDPROX = "FEDPROX"
    FEDBN = "FEDBN"
    FEDMHA = "FEDMHA"


@dataclass(frozen=True)
class StrategyConfig:
    """Which algorithm runs, and with which knobs.

    ``mu`` weighs the proximal pull (FEDPROX / FEDMHA); ``weighted`` picks
    sample-count aggregation weights over uniform ones; the name-pattern
    tuples select which parameters are aligned (FEDMHA) or withheld from
    aggregation (FEDBN).
    """

    kind: StrategyKind
    mu: float = 0.5
    weighted: bool = True
    aligned_names: tuple[str, ...] = DEFAULT_ALIGNED_NAMES
    excluded_names: tuple[str, ...] = DEFAULT_EXCLUDED_NAMES
    local_epochs: int = 1
    batch_size: int = 16
    lr: float = 0.01
    clip_norm: float = 5.0
    clip_mode: str = "norm"

    def __post_init__(self):
        if isinstance(self.kind, str) and not isinstance(self.kind, StrategyKind):
            object.__setattr__(self, "kind", StrategyKind(self.kind))
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("lr and clip_norm must be positive")


@dataclass
class ClientState:
    """One simulated participant.

    ``weights`` persists across rounds only where a strategy needs it
    (LOCAL keeps the whole model, FEDBN its excluded parameters); other
    strategies reset it each round from the broadcast snapshot.
    """

    id: int
    train_data: Dataset
    test_data: Dataset
    weights: ParamSet | None = None
    seed_root: int = 0

    def rng_for_round(self, round_index: int) -> np.random.Generator:
        # Stream mixing: generator seeded with (seed_root, client id, round).
        return np.random.default_rng(
            np.random.SeedSequence((self.seed_root, self.id, round_index))
        )


@dataclass
class ServerState:
    global_weights: ParamSet
    round: int = 0


@dataclass
class ClientUpdate:
    client_id: int
    weights: ParamSet
    num_samples: int
    train_losses: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class RoundReport:
    """Everything measured after one round.

    ``client_local`` evaluates the round's reference model on each client's
    own test split (the reference is the aggregated model, or the client's
    own model under LOCAL); ``client_benchmark`` evaluates each client's
    local model on the shared benchmark set; ``global_benchmark`` is the
    aggregated model on that same benchmark.
    """

    round_index: int
    client_local: tuple[ClientMetrics, ...]
    client_benchmark: tuple[ClientMetrics, ...]
    train_sizes: tuple[int, ...]
    fairness: FairnessSummary
    global_benchmark: ClientMetrics
    global_mean_loss: float
    wall_time: float


def match_names(names: Iterable[str], patterns: Sequence[str]) -> tuple[str, ...]:
    """Sorted parameter names matching any of the glob-style patterns."""
    return tuple(
        sorted(n for n in names if any(fnmatch.fnmatchcase(n, p) for p in patterns))
    )


def alignment_penalty(local: ParamSet, global_: ParamSet, patterns: Sequence[str]) -> float:
    """Summed squared distance between matching local and broadcast tensors."""
    local.require_congruent(global_, "alignment_penalty")
    names = match_names(local.names(), patterns)
    if not names:
        raise StrategyError(f"patterns {list(patterns)} match no parameters")
    total = 0.0
    for name in names:
        diff = local[name].array - global_[name].array
        total += float(np.sum(diff * diff))
    return total


def _penalty_patterns(strategy: StrategyConfig) -> tuple[str, ...]:
    if strategy.kind is StrategyKind.FEDPROX:
        return ("*",)
    if strategy.kind is StrategyKind.FEDMHA:
        return strategy.aligned_names
    return ()


def local_objective_grad(
    weights: ParamSet,
    global_weights: ParamSet,
    images: Sequence[Tensor],
    labels: Sequence[int],
    strategy: StrategyConfig,
    model_config: ViTConfig,
) -> tuple[float, ParamSet]:
    """Loss and exact gradient of one client's objective on one batch.

    The objective is the batch cross-entropy plus, for the proximal
    strategies, ``(mu/2)`` times the alignment penalty over their parameter
    selection. The penalty's gradient enters analytically as
    ``mu * (w - w_global)`` on the selected names, before any clipping.
    """
    weights.require_congruent(global_weights, "local_objective_grad")
    if not images:
        raise ValueError("batch must be non-empty")
    tape = GradTape()
    leaves = tape.watch(weights)
    loss_node = cross_entropy(forward_batch(leaves, list(images), model_config), labels)
    grads = tape.gradients(loss_node)
    loss = loss_node.item()

    patterns = _penalty_patterns(strategy)
    if patterns and strategy.mu != 0.0:
        loss += 0.5 * strategy.mu * alignment_penalty(weights, global_weights, patterns)
        pulled = set(match_names(weights.names(), patterns))
        mu = strategy.mu
        grads = grads.map_arrays(
            lambda name, g: g + mu * (weights[name].array - global_weights[name].array)
            if name in pulled
            else g
        )
    return loss, grads


def _starting_weights(
    client: ClientState, global_weights: ParamSet, strategy: StrategyConfig
) -> ParamSet:
    if strategy.kind is StrategyKind.LOCAL:
        return client.weights if client.weights is not None else global_weights
    if strategy.kind is StrategyKind.FEDBN and client.weights is not None:
        kept = match_names(global_weights.names(), strategy.excluded_names)
        if not kept:
            raise StrategyError(
                f"excluded_names {list(strategy.excluded_names)} match no parameters"
            )
        own = client.weights
        merged = {name: (own[name] if name in kept else global_weights[name])
                  for name in global_weights.names()}
        return ParamSet(merged)
    return global_weights


def local_train(
    client: ClientState,
    global_weights: ParamSet,
    strategy: StrategyConfig,
    model_config: ViTConfig,
    round_index: int,
) -> ClientUpdate:
    """Mini-batch SGD over the client's training shard.

    Runs ``local_epochs`` shuffled passes (per-round derived stream), one
    clipped step per batch, and returns the final weights, the shard size
    and the per-epoch mean training loss.
    """
    n = len(client.train_data)
    if n == 0:
        raise ValueError(f"client {client.id} has no training samples")
    weights = _starting_weights(client, global_weights, strategy)
    rng = client.rng_for_round(round_index)
    epoch_losses: list[float] = []
    for _ in range(strategy.local_epochs):
        order = rng.permutation(n)
        batch_losses: list[float] = []
        for start in range(0, n, strategy.batch_size):
            chosen = order[start:start + strategy.batch_size]
            images = [client.train_data.images[i] for i in chosen]
            labels = [client.train_data.labels[i] for i in chosen]
            loss, grads = local_objective_grad(
                weights, global_weights, images, labels, strategy, model_config
            )
            weights = sgd_step(
                weights, grads, strategy.lr, strategy.clip_norm, strategy.clip_mode
            )
            batch_losses.append(loss)
        epoch_losses.append(sum(batch_losses) / len(batch_losses))
    return ClientUpdate(client.id, weights, n, epoch_losses)


def aggregate(
    updates: Sequence[ClientUpdate], prev_global: ParamSet, strategy: StrategyConfig
) -> ParamSet:
    """Combine client updates into the next broadcast weights.

    Per parameter the result is the coefficient-weighted mean of the client
    values (sample-count coefficients when ``weighted``, uniform otherwise),
    computed as anchored deltas off the lowest-id update so that identical
    updates aggregate to themselves exactly. Under FEDBN the excluded
    parameters keep their previous broadcast value. Summation runs in
    ascending client-id order whatever order ``updates`` arrives in.
    """
    if not updates:
        raise ValueError("aggregate needs at least one update")
    ordered = sorted(updates, key=lambda u: u.client_id)
    for u in ordered:
        u.weights.require_congruent(prev_global, f"aggregate(client {u.client_id})")
    if strategy.weighted:
        total = float(sum(u.num_samples for u in ordered))
        coefs = [u.num_samples / total for u in ordered]
    else:
        coefs = [1.0 / len(ordered)] * len(ordered)

    kept: set[str] = set()
    if strategy.kind is StrategyKind.FEDBN:
        kept = set(match_names(prev_global.names(), strategy.excluded_names))
        if not kept:
            raise StrategyError(
                f"excluded_names {list(strategy.excluded_names)} match no parameters"
            )

    anchor = ordered[0].weights
    merged: dict[str, Tensor] = {}
    for name in prev_global.names():
        if name in kept:
            merged[name] = prev_global[name]
            continue
        base = anchor[name].array
        acc = np.zeros_like(base)
        for coef, update in zip(coefs, ordered):
            acc = acc + coef * (update.weights[name].array - base)
        merged[name] = Tensor._wrap(base + acc)
    return ParamSet(merged)


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    strategy: StrategyConfig,
    model_config: ViTConfig,
    benchmark: Dataset,
) -> tuple[ServerState, RoundReport]:
    """One federation round: broadcast, train every client, aggregate, evaluate.

    Client steps are mutually independent given the broadcast snapshot;
    they run here in client-id order. Updates mutate each client's
    persisted weights according to the strategy's persistence rule.
    """
    started = time.perf_counter()
    round_index = server.round + 1
    snapshot = server.global_weights
    ordered = sorted(clients, key=lambda c: c.id)
    updates = [
        local_train(c, snapshot, strategy, model_config, round_index) for c in ordered
    ]

    if strategy.kind is StrategyKind.LOCAL:
        new_global = snapshot
    else:
        new_global = aggregate(updates, snapshot, strategy)

    persist = strategy.kind in (StrategyKind.LOCAL, StrategyKind.FEDBN)
    for client, update in zip(ordered, updates):
        client.weights = update.weights if persist else None

    client_models = {u.client_id: u.weights for u in updates}
    report = evaluate_round(
        round_index, new_global, ordered, client_models, strategy, model_config,
        benchmark, started,
    )
    return ServerState(new_global, round_index), report


def evaluate_round(
    round_index: int,
    global_weights: ParamSet,
    clients: Sequence[ClientState],
    client_models: dict[int, ParamSet],
    strategy: StrategyConfig,
    model_config: ViTConfig,
    benchmark: Dataset,
    started: float,
) -> RoundReport:
    """Measure one round's models; also used for the pre-training round 0."""
    local_is_reference = strategy.kind is StrategyKind.LOCAL
    client_local: list[ClientMetrics] = []
    client_bench: list[ClientMetrics] = []
    train_sizes: list[int] = []
    for client in sorted(clients, key=lambda c: c.id):
        own = client_models.get(client.id, global_weights)
        reference = own if local_is_reference else global_weights
        client_local.append(
            accuracy(reference, client.test_data, model_config, client.id)
        )
        client_bench.append(accuracy(own, benchmark, model_config, client.id))
        train_sizes.append(len(client.train_data))
    fairness = fairness_summary(client_local)
    global_bench = accuracy(global_weights, benchmark, model_config)
    mean_loss = weighted_mean(
        [m.mean_loss for m in client_local], [m.total for m in client_local]
    )
    return RoundReport(
        round_index=round_index,
        client_local=tuple(client_local),
        client_benchmark=tuple(client_bench),
        train_sizes=tuple(train_sizes),
        fairness=fairness,
        global_benchmark=global_bench,
        global_mean_loss=mean_loss,
        wall_time=time.perf_counter() - started,
    )
