"""Simulation configuration: a single dataclass validated up front.

A config can come from CLI flags, a JSON file, or both (flags win). All
randomness in a run derives from ``seed``, so two runs with equal configs
produce identical ledgers, reports, and model bytes.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

SEED_ENV_VAR = "FEDSIM_SEED"
DEFAULT_SEED = 42

BEHAVIOR_HONEST = "honest"
BEHAVIOR_NONSUBMITTER = "nonsubmitter"
BEHAVIOR_INFLATED = "inflated"


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class WorkerBehavior:
    """Scoring behavior of one worker, fixed for the whole run.

    ``nonsubmitter`` skips score submission from ``from_round`` on, or with
    probability ``prob`` per round when given. ``inflated`` reports its own
    model at the maximum score and every peer at ``floor_bp``.
    """

    kind: str = BEHAVIOR_HONEST
    from_round: int = 0
    prob: Optional[float] = None
    floor_bp: int = 0

    @property
    def honest(self) -> bool:
        return self.kind == BEHAVIOR_HONEST


def parse_behavior(spec: str) -> WorkerBehavior:
    """Parse ``honest``, ``nonsubmitter[:from=R|:p=P]``, ``inflated[:floor=B]``."""
    kind, _, rest = spec.strip().partition(":")
    kind = kind.lower()
    options: dict[str, str] = {}
    if rest:
        for part in rest.split(","):
            key, eq, value = part.partition("=")
            if not eq:
                raise ConfigError(f"malformed behavior option {part!r} in {spec!r}")
            options[key.strip()] = value.strip()
    try:
        if kind == BEHAVIOR_HONEST:
            if options:
                raise ConfigError(f"honest takes no options, got {spec!r}")
            return WorkerBehavior(BEHAVIOR_HONEST)
        if kind == BEHAVIOR_NONSUBMITTER:
            prob = float(options["p"]) if "p" in options else None
            if prob is not None and not 0.0 <= prob <= 1.0:
                raise ConfigError(f"nonsubmitter probability must lie in [0,1], got {prob}")
            return WorkerBehavior(
                BEHAVIOR_NONSUBMITTER,
                from_round=int(options.get("from", 0)),
                prob=prob,
            )
        if kind == BEHAVIOR_INFLATED:
            floor_bp = int(options.get("floor", 0))
            if not 0 <= floor_bp <= 10000:
                raise ConfigError(f"inflated floor must lie in [0,10000], got {floor_bp}")
            return WorkerBehavior(BEHAVIOR_INFLATED, floor_bp=floor_bp)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"cannot parse behavior {spec!r}: {exc}") from exc
    raise ConfigError(f"unknown behavior kind {kind!r}")


@dataclass(frozen=True)
class DatasetConfig:
    n: int = 3000
    d: int = 64
    classes: int = 10
    spread: float = 0.3


@dataclass(frozen=True)
class SimConfig:
    workers: int = 3
    rounds: int = 30
    epochs_per_round: int = 3
    top_k: int = 2
    reward: int = 1000
    collateral: int = 100
    encrypt: bool = True
    seed: int = DEFAULT_SEED
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    behaviors: tuple[str, ...] = ()
    push_window: int = 5
    tolerance_bp: int = 2000
    flag_fraction: float = 0.5
    parallel: bool = False
    learning_rate: float = 0.05
    batch_size: int = 32
    hidden_layers: tuple[int, ...] = (32,)
    eval_fraction: float = 0.2
    holdout_n: int = 1000
    shared_testset: bool = False

    def validate(self) -> None:
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.workers < 2:
            raise ConfigError(f"workers must be >= 2, got {self.workers}")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.epochs_per_round < 1:
            raise ConfigError(f"epochs-per-round must be >= 1, got {self.epochs_per_round}")
        if not 1 <= self.top_k <= self.workers:
            raise ConfigError(
                f"top-k must lie in [1, workers={self.workers}], got {self.top_k}"
            )
        if self.reward <= 0:
            raise ConfigError(f"reward must be positive, got {self.reward}")
        if self.collateral < 0:
            raise ConfigError(f"collateral must be >= 0, got {self.collateral}")
        if self.behaviors and len(self.behaviors) != self.workers:
            raise ConfigError(
                f"behaviors must list one entry per worker ({self.workers}), "
                f"got {len(self.behaviors)}"
            )
        for spec in self.behaviors:
            parse_behavior(spec)
        if self.push_window < 1:
            raise ConfigError(f"push-window must be >= 1, got {self.push_window}")
        if self.tolerance_bp < 0:
            raise ConfigError(f"tolerance-bp must be >= 0, got {self.tolerance_bp}")
        if not 0.0 <= self.flag_fraction <= 1.0:
            raise ConfigError(f"flag-fraction must lie in [0,1], got {self.flag_fraction}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning-rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch-size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ConfigError(f"eval-fraction must lie in (0,1), got {self.eval_fraction}")
        if self.holdout_n < 1:
            raise ConfigError(f"holdout-n must be >= 1, got {self.holdout_n}")
        ds = self.dataset
        if ds.classes < 2 or ds.d < 1 or ds.spread < 0:
            raise ConfigError(f"invalid dataset config {ds}")
        if ds.n < ds.classes * self.workers:
            raise ConfigError(
                f"dataset n={ds.n} too small for {self.workers} workers x {ds.classes} classes"
            )

    def parsed_behaviors(self) -> list[WorkerBehavior]:
        if not self.behaviors:
            return [WorkerBehavior()] * self.workers
        return [parse_behavior(spec) for spec in self.behaviors]

    def arch(self) -> tuple[int, ...]:
        return (self.dataset.d, *self.hidden_layers, self.dataset.classes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        data = dict(data)
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "dataset" in data and isinstance(data["dataset"], dict):
            data["dataset"] = DatasetConfig(**data["dataset"])
        for key in ("behaviors", "hidden_layers"):
            if key in data and isinstance(data[key], list):
                data[key] = tuple(data[key])
        return cls(**data)

    @classmethod
    def from_json_file(cls, path: str | Path) -> "SimConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        return cls.from_dict(data)


def seed_from_env(default: int = DEFAULT_SEED) -> int:
    """Fall back to the FEDSIM_SEED environment variable when no seed is given."""
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from exc
