"""Experiment configuration: JSON schema, validation, seed derivation.

A configuration document looks like::

    {
      "seed": 0,
      "rounds": 5,
      "test_fraction": 0.25,
      "benchmark_fraction": 0.2,
      "model": {"image_h": 16, "image_w": 16, "channels_in": 1, "patch": 4,
                "dim": 32, "heads": 2, "blocks": 2, "mlp_hidden": 64,
                "classes": 3, "use_layernorm": false, "activation": "relu"},
      "data": {"synthetic": {"classes": 3, "samples_per_class": 200,
                             "image_h": 16, "image_w": 16,
                             "noise_sigma": 0.1, "seed": 0}},
      "partition": {"num_clients": 10, "alpha": 0.1, "seed": 0,
                    "min_per_client": 2},
      "strategy": {"kind": "FEDAVG", "mu": 0.5, "weighted": true,
                   "local_epochs": 1, "batch_size": 16,
                   "lr": 0.01, "clip_norm": 5.0},
      "output_dir": "out",
      "sweep": {"alphas": [...], "strategies": [...], "seeds": [...]}
    }

``data`` takes either ``synthetic`` or ``idx`` (``{"images": p, "labels": p}``).
Every field except ``partition.alpha``, ``strategy.kind`` and the data source
has a default. Sub-seeds (``data.synthetic.seed``, ``partition.seed``) default
to the top-level ``seed``; per-client shuffling and split seeds are derived
from it. Validation failures raise :class:`ConfigError` naming the offending
field path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

from .data import PartitionSpec, SyntheticSpec
from .federation import StrategyConfig, StrategyKind
from .model import ViTConfig

__all__ = ["ConfigError", "ExperimentConfig", "SweepSpec", "parse_config", "load_config", "parse_sweep"]


class ConfigError(Exception):
    """Invalid configuration; ``field`` is the dotted path of the bad entry."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ViTConfig
    synthetic: SyntheticSpec | None
    idx_images: str | None
    idx_labels: str | None
    partition: PartitionSpec
    strategy: StrategyConfig
    rounds: int
    test_fraction: float
    benchmark_fraction: float
    seed: int
    output_dir: str | None


@dataclass(frozen=True)
class SweepSpec:
    alphas: tuple[float, ...]
    strategies: tuple[StrategyKind, ...]
    seeds: tuple[int, ...]


def _section(raw: dict, key: str, required: bool = False) -> dict:
    value = raw.get(key)
    if value is None:
        if required:
            raise ConfigError(key, "required section is missing")
        return {}
    if not isinstance(value, dict):
        raise ConfigError(key, f"expected an object, got {type(value).__name__}")
    return value


def _get(section: dict, path: str, key: str, kind, default=None, required: bool = False):
    field = f"{path}.{key}" if path else key
    if key not in section:
        if required:
            raise ConfigError(field, "required field is missing")
        return default
    value = section[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(field, f"expected an integer, got {value!r}")
    if not isinstance(value, kind):
        raise ConfigError(field, f"expected {kind.__name__}, got {type(value).__name__}")
    return value


def _build(field: str, factory, **kwargs):
    try:
        return factory(**kwargs)
    except ValueError as exc:
        raise ConfigError(field, str(exc)) from exc


def parse_config(raw: dict[str, Any]) -> ExperimentConfig:
    """Validate a parsed JSON document and resolve defaults and sub-seeds."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "configuration must be a JSON object")
    seed = _get(raw, "", "seed", int, default=0)
    if seed < 0:
        raise ConfigError("seed", "must be non-negative")

    model_raw = _section(raw, "model")
    known = {"image_h", "image_w", "channels_in", "patch", "dim", "heads",
             "blocks", "mlp_hidden", "classes", "use_layernorm", "activation"}
    for key in model_raw:
        if key not in known:
            raise ConfigError(f"model.{key}", "unknown field")
    model = _build("model", ViTConfig, **model_raw)

    data_raw = _section(raw, "data", required=True)
    synthetic = None
    idx_images = idx_labels = None
    if "synthetic" in data_raw and "idx" in data_raw:
        raise ConfigError("data", "choose either synthetic or idx, not both")
    if "synthetic" in data_raw:
        syn = _section(data_raw, "synthetic")
        synthetic = _build(
            "data.synthetic",
            SyntheticSpec,
            classes=_get(syn, "data.synthetic", "classes", int, default=model.classes),
            samples_per_class=_get(syn, "data.synthetic", "samples_per_class", int, default=200),
            image_h=_get(syn, "data.synthetic", "image_h", int, default=model.image_h),
            image_w=_get(syn, "data.synthetic", "image_w", int, default=model.image_w),
            noise_sigma=_get(syn, "data.synthetic", "noise_sigma", float, default=0.1),
            seed=_get(syn, "data.synthetic", "seed", int, default=seed),
        )
        if synthetic.classes != model.classes:
            raise ConfigError("data.synthetic.classes", "must match model.classes")
        if (synthetic.image_h, synthetic.image_w) != (model.image_h, model.image_w):
            raise ConfigError("data.synthetic.image_h", "image size must match the model")
    elif "idx" in data_raw:
        idx = _section(data_raw, "idx")
        idx_images = _get(idx, "data.idx", "images", str, required=True)
        idx_labels = _get(idx, "data.idx", "labels", str, required=True)
    else:
        raise ConfigError("data", "needs a synthetic or idx source")

    part_raw = _section(raw, "partition", required=True)
    partition = _build(
        "partition",
        PartitionSpec,
        num_clients=_get(part_raw, "partition", "num_clients", int, default=10),
        alpha=_get(part_raw, "partition", "alpha", float, required=True),
        seed=_get(part_raw, "partition", "seed", int, default=seed),
        min_per_client=_get(part_raw, "partition", "min_per_client", int, default=2),
    )

    strat_raw = _section(raw, "strategy", required=True)
    kind_name = _get(strat_raw, "strategy", "kind", str, required=True)
    try:
        kind = StrategyKind(kind_name.upper())
    except ValueError:
        raise ConfigError(
            "strategy.kind",
            f"unknown strategy {kind_name!r}; pick one of "
            f"{[k.value for k in StrategyKind]}",
        ) from None
    strat_kwargs: dict[str, Any] = {"kind": kind}
    for key, kind_t in (
        ("mu", float), ("weighted", bool), ("local_epochs", int),
        ("batch_size", int), ("lr", float), ("clip_norm", float), ("clip_mode", str),
    ):
        value = _get(strat_raw, "strategy", key, kind_t)
        if value is not None:
            strat_kwargs[key] = value
    for key in ("aligned_names", "excluded_names"):
        if key in strat_raw:
            value = strat_raw[key]
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise ConfigError(f"strategy.{key}", "expected a list of name patterns")
            strat_kwargs[key] = tuple(value)
    strategy = _build("strategy", StrategyConfig, **strat_kwargs)

    rounds = _get(raw, "", "rounds", int, default=5)
    if rounds < 0:
        raise ConfigError("rounds", "must be non-negative")
    test_fraction = _get(raw, "", "test_fraction", float, default=0.25)
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction", "must lie strictly between 0 and 1")
    benchmark_fraction = _get(raw, "", "benchmark_fraction", float, default=0.2)
    if not 0.0 < benchmark_fraction < 1.0:
        raise ConfigError("benchmark_fraction", "must lie strictly between 0 and 1")
    output_dir = _get(raw, "", "output_dir", str)

    if strategy.kind is StrategyKind.FEDBN and not model.use_layernorm:
        raise ConfigError(
            "strategy.kind",
            "FEDBN needs normalisation parameters; set model.use_layernorm true",
        )

    return ExperimentConfig(
        model=model,
        synthetic=synthetic,
        idx_images=idx_images,
        idx_labels=idx_labels,
        partition=partition,
        strategy=strategy,
        rounds=rounds,
        test_fraction=test_fraction,
        benchmark_fraction=benchmark_fraction,
        seed=seed,
        output_dir=output_dir,
    )


def parse_sweep(raw: dict[str, Any], base: ExperimentConfig) -> SweepSpec:
    """Sweep axes from the ``sweep`` section; absent axes collapse to the base value."""
    sweep_raw = _section(raw, "sweep")
    alphas = sweep_raw.get("alphas", [base.partition.alpha])
    strategies = sweep_raw.get("strategies", [base.strategy.kind.value])
    seeds = sweep_raw.get("seeds", [base.seed])
    for key, values in (("alphas", alphas), ("strategies", strategies), ("seeds", seeds)):
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep.{key}", "expected a non-empty list")
    try:
        kinds = tuple(StrategyKind(str(s).upper()) for s in strategies)
    except ValueError as exc:
        raise ConfigError("sweep.strategies", str(exc)) from exc
    try:
        alpha_values = tuple(float(a) for a in alphas)
        seed_values = tuple(int(s) for s in seeds)
    except (TypeError, ValueError) as exc:
        raise ConfigError("sweep", f"malformed axis value: {exc}") from exc
    return SweepSpec(alphas=alpha_values, strategies=kinds, seeds=seed_values)


def sweep_cell(raw: dict[str, Any], kind: StrategyKind, alpha: float, seed: int) -> ExperimentConfig:
    """The base document re-parsed with one sweep cell's axis values applied.

    Explicit sub-seeds in the base document stay pinned; defaulted ones
    follow the cell seed.
    """
    cell = json.loads(json.dumps(raw))
    cell["seed"] = seed
    cell.setdefault("partition", {})["alpha"] = alpha
    cell.setdefault("strategy", {})["kind"] = kind.value
    cell.pop("output_dir", None)
    return parse_config(cell)


def load_config(path: str | Path) -> tuple[dict[str, Any], ExperimentConfig]:
    """Read and validate a configuration file; returns (raw document, config)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"not valid JSON: {exc}") from exc
    return raw, parse_config(raw)


def with_seed(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Config with the root seed (and the sub-seeds that followed it) replaced."""
    synthetic = config.synthetic
    if synthetic is not None and synthetic.seed == config.seed:
        synthetic = replace(synthetic, seed=seed)
    partition = config.partition
    if partition.seed == config.seed:
        partition = replace(partition, seed=seed)
    return replace(config, seed=seed, synthetic=synthetic, partition=partition)
