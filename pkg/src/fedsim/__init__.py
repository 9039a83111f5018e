"""Deterministic simulator for incentive-driven decentralized federated
learning: a task ledger state machine, an encrypted content-addressed model
store, round-based peer scoring with top-K rewards and collateral slashing,
and plain model averaging over a small native learner."""

from .aggregation import average_models
from .config import DatasetConfig, SimConfig, WorkerBehavior, parse_behavior
from .learner import Dataset, Metrics, ModelState, TrainConfig
from .ledger import TaskLedger, TaskStatus, initialize_task, replay_events
from .protocol import RunOutcome, RunReport, run_task
from .store import ContentStore

__version__ = "0.1.0"

__all__ = [
    "average_models",
    "ContentStore",
    "Dataset",
    "DatasetConfig",
    "initialize_task",
    "Metrics",
    "ModelState",
    "parse_behavior",
    "replay_events",
    "RunOutcome",
    "RunReport",
    "run_task",
    "SimConfig",
    "TaskLedger",
    "TaskStatus",
    "TrainConfig",
    "WorkerBehavior",
    "__version__",
]
