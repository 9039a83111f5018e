"""Actor layer and round driver.

``run_task`` executes the full task lifecycle against an in-process ledger
and content store: the requester escrows the reward and publishes the
initial model; workers join with collateral and registered public keys;
then each round every worker (1) fetches the previous round's models and
averages them into a common starting point, (2) trains locally for a fixed
number of epochs, (3) pushes its trained model (sealed per recipient when
encryption is on), (4) fetches and scores every peer's model on its local
held-out slice, and (5) the requester aggregates scores, slashes detected
dishonest workers, records the top-K ranking, distributes the round budget,
and advances the round. After the last round the requester averages the
final models, publishes the result, and closes the task.

Every step draws from named sub-streams of the run seed, so a config
reproduces its event log and report bit for bit, and runs with encryption
on and off produce identical model trajectories.
"""

from __future__ import annotations

import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import crypto
from .aggregation import average_models
from .config import (
    BEHAVIOR_INFLATED,
    BEHAVIOR_NONSUBMITTER,
    SimConfig,
    WorkerBehavior,
)
from .learner import (
    Dataset,
    ModelState,
    TrainConfig,
    accuracy_bp,
    deserialize_model,
    evaluate,
    generate_dataset,
    init_model,
    partition_even,
    serialize_model,
    train_local,
)
from .ledger import ScoreMatrix, TaskLedger, initialize_task
from .store import ContentHash, ContentStore, content_hash

REQUESTER = "requester"
MAX_BP = 10000

# Sub-stream tags hanging off the run seed; never reuse a tag for two purposes.
_DATASET, _PARTITION, _INIT, _TRAIN, _KEYS, _SEAL, _BEHAVIOR = range(7)


class ProtocolError(Exception):
    pass


class EmptyMatrix(ProtocolError):
    pass


class QuorumTooSmall(ProtocolError):
    pass


class RunAborted(ProtocolError):
    pass


def _sub_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence((seed, *path)).generate_state(1, np.uint64)[0])


def _sub_rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, *path)))


# -- score handling ----------------------------------------------------------


def aggregate_scores(matrix: ScoreMatrix) -> list[tuple[str, int]]:
    """Per-model floor mean over peer scores, sorted by (-score, address).

    Self-reported scores are ignored; a model nobody scored aggregates to 0.
    """
    if matrix.is_empty():
        raise EmptyMatrix(f"round {matrix.round} has no submissions")
    results = []
    for owner in matrix.owners():
        peer_scores = [
            row[owner]
            for evaluator, row in matrix.scores.items()
            if evaluator != owner and owner in row
        ]
        aggregate = sum(peer_scores) // len(peer_scores) if peer_scores else 0
        results.append((owner, aggregate))
    results.sort(key=lambda item: (-item[1], item[0]))
    return results


def detect_dishonest(
    matrix: ScoreMatrix, tolerance_bp: int, flag_fraction: float
) -> set[str]:
    """Median-deviation outlier detection plus the non-submission rule.

    An evaluator is flagged on a model when its score strays from the peer
    median by more than ``tolerance_bp``; it is dishonest when flagged on
    more than ``flag_fraction`` of the models it scored. A worker whose
    model is on the grid but who submitted nothing is dishonest outright.
    """
    evaluators = matrix.evaluators()
    if len(evaluators) < 3:
        raise QuorumTooSmall(f"need >= 3 evaluators for medians, got {len(evaluators)}")
    owners = matrix.owners()
    medians: dict[str, float] = {}
    for owner in owners:
        peer_scores = [
            row[owner]
            for evaluator, row in matrix.scores.items()
            if evaluator != owner and owner in row
        ]
        if peer_scores:
            medians[owner] = statistics.median(peer_scores)
    dishonest = set(owners) - set(evaluators)
    for evaluator in evaluators:
        row = matrix.scores[evaluator]
        scored = [owner for owner in row if owner != evaluator]
        if not scored:
            continue
        flags = sum(
            1
            for owner in scored
            if owner in medians and abs(row[owner] - medians[owner]) > tolerance_bp
        )
        if flags > flag_fraction * len(scored):
            dishonest.add(evaluator)
    return dishonest


# -- push tracking -----------------------------------------------------------


@dataclass
class PushTracker:
    """Rolling window over a client's pushed hashes; overflow gets evicted."""

    window: int
    pushed: list[ContentHash] = field(default_factory=list)


def track_push(tracker: PushTracker, digest: ContentHash) -> list[ContentHash]:
    """Record a push; returns the oldest hashes once the window overflows."""
    tracker.pushed.append(digest)
    if len(tracker.pushed) <= tracker.window:
        return []
    overflow = tracker.pushed[: -tracker.window]
    del tracker.pushed[: -tracker.window]
    return overflow


# -- run driver --------------------------------------------------------------


@dataclass
class RoundRecord:
    round: int
    model_hashes: dict[str, str]
    submissions: dict
    aggregates: list[tuple[str, int]]
    ranking: list[str]
    payouts: dict[str, int]
    flagged: list[str]
    redistributions: dict[str, dict[str, int]]
    wall_ms: float

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "model_hashes": dict(sorted(self.model_hashes.items())),
            "submissions": self.submissions,
            "aggregates": [[a, s] for a, s in self.aggregates],
            "ranking": list(self.ranking),
            "payouts": dict(sorted(self.payouts.items())),
            "flagged": list(self.flagged),
            "redistributions": {
                k: dict(sorted(v.items())) for k, v in sorted(self.redistributions.items())
            },
            "wall_ms": self.wall_ms,
        }


_TIMING_KEYS = {"wall_ms", "elapsed_ms", "total_wall_ms"}
_TRANSPORT_KEYS = {"encrypt", "parallel", "store_objects", "store_gc_removed", "event_log_path"}


def _strip_volatile(node):
    if isinstance(node, dict):
        return {
            k: _strip_volatile(v)
            for k, v in node.items()
            if k not in _TIMING_KEYS and k not in _TRANSPORT_KEYS
        }
    if isinstance(node, list):
        return [_strip_volatile(v) for v in node]
    return node


@dataclass
class RunReport:
    config: dict
    requester: str
    workers: list[str]
    rounds: list[dict]
    epoch_rows: list[dict]
    summary: dict
    event_log_path: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "requester": self.requester,
            "workers": self.workers,
            "rounds": self.rounds,
            "epoch_rows": self.epoch_rows,
            "summary": self.summary,
            "event_log_path": self.event_log_path,
        }

    def fingerprint(self) -> dict:
        """Report content minus wall-clock timings and transport details.

        Seed-matched runs with encryption on and off share this fingerprint.
        """
        return _strip_volatile(self.to_dict())


@dataclass
class RunOutcome:
    report: RunReport
    ledger: TaskLedger
    store: ContentStore
    final_model: ModelState


@dataclass
class _WorkerCtx:
    index: int
    address: str
    behavior: WorkerBehavior
    train_set: Dataset
    eval_set: Dataset
    keys: crypto.KeyPair
    seal_rng: np.random.Generator
    behavior_rng: np.random.Generator
    tracker: PushTracker
    model: Optional[ModelState] = None  # model trained in the latest round


def _map_workers(parallel: bool, fn: Callable, ctxs: Sequence[_WorkerCtx]) -> list:
    if parallel and len(ctxs) > 1:
        with ThreadPoolExecutor(max_workers=len(ctxs)) as pool:
            return list(pool.map(fn, ctxs))
    return [fn(ctx) for ctx in ctxs]


def run_task(config: SimConfig) -> RunOutcome:
    """Execute one full task; see the module docstring for the workflow."""
    config.validate()
    t_run = time.perf_counter()
    seed = config.seed
    ds_cfg = config.dataset

    full = generate_dataset(
        _sub_seed(seed, _DATASET),
        ds_cfg.n + config.holdout_n,
        ds_cfg.d,
        ds_cfg.classes,
        ds_cfg.spread,
    )
    pool = Dataset(full.features[: ds_cfg.n], full.labels[: ds_cfg.n])
    holdout = Dataset(full.features[ds_cfg.n :], full.labels[ds_cfg.n :])
    shards = partition_even(pool, config.workers, _sub_seed(seed, _PARTITION))

    behaviors = config.parsed_behaviors()
    requester_keys = crypto.generate_keypair(_sub_rng(seed, _KEYS, 0))
    ctxs: list[_WorkerCtx] = []
    for i, shard in enumerate(shards):
        cut = max(1, int(len(shard) * (1.0 - config.eval_fraction)))
        train_set = Dataset(shard.features[:cut], shard.labels[:cut])
        local_eval = Dataset(shard.features[cut:], shard.labels[cut:])
        ctxs.append(
            _WorkerCtx(
                index=i,
                address=f"w{i}",
                behavior=behaviors[i],
                train_set=train_set,
                eval_set=holdout if config.shared_testset else local_eval,
                keys=crypto.generate_keypair(_sub_rng(seed, _KEYS, i + 1)),
                seal_rng=_sub_rng(seed, _SEAL, i + 1),
                behavior_rng=_sub_rng(seed, _BEHAVIOR, i + 1),
                tracker=PushTracker(config.push_window),
            )
        )
    by_address = {ctx.address: ctx for ctx in ctxs}
    requester_seal_rng = _sub_rng(seed, _SEAL, 0)
    requester_tracker = PushTracker(config.push_window)

    store = ContentStore()
    initial = init_model(config.arch(), _sub_seed(seed, _INIT))
    initial_bytes = serialize_model(initial)

    def push_model(owner_ctx: Optional[_WorkerCtx], payload: bytes, recipients: list[str]) -> ContentHash:
        """Store a payload for the given recipients, evicting old pins."""
        if config.encrypt:
            pubs = {}
            for address in recipients:
                pubs[address] = (
                    requester_keys.public if address == REQUESTER else by_address[address].keys.public
                )
            rng = owner_ctx.seal_rng if owner_ctx is not None else requester_seal_rng
            blob = crypto.serialize_group_envelope(
                crypto.seal_model_group(pubs, payload, rng)
            )
        else:
            blob = payload
        digest = store.put(blob)
        tracker = owner_ctx.tracker if owner_ctx is not None else requester_tracker
        for evicted in track_push(tracker, digest):
            store.unpin(evicted)
        return digest

    def fetch_model(ctx_address: str, private_key, digest: ContentHash) -> ModelState:
        blob = store.get(digest)
        if config.encrypt:
            group = crypto.deserialize_group_envelope(blob)
            blob = crypto.open_model_group(ctx_address, private_key, group)
        return deserialize_model(blob)

    model_uri = push_model(None, initial_bytes, [ctx.address for ctx in ctxs])

    ledger = initialize_task(
        model_uri,
        config.rounds,
        config.reward,
        config.collateral,
        config.top_k,
        requester=REQUESTER,
    )
    for ctx in ctxs:
        ledger.join_task(ctx.address, config.collateral, crypto.public_pem(ctx.keys.public))
    ledger.start_task()

    epoch_rows: list[dict] = []
    round_records: list[dict] = []
    prev_hashes: dict[str, ContentHash] = {}
    slashed_overall: set[str] = set()

    for rnd in range(config.rounds):
        t_round = time.perf_counter()
        active = ledger.active_workers()
        active_ctxs = [by_address[a] for a in active]

        # Phases 1+2: average the prior round's models, then train locally.
        def train_phase(ctx: _WorkerCtx) -> tuple[ModelState, list[dict]]:
            if rnd == 0:
                inputs = [fetch_model(ctx.address, ctx.keys.private, model_uri)]
            else:
                inputs = []
                for owner in active:  # sorted, so averaging order is canonical
                    if owner == ctx.address:
                        inputs.append(ctx.model)
                    else:
                        inputs.append(
                            fetch_model(ctx.address, ctx.keys.private, prev_hashes[owner])
                        )
            model = average_models(inputs)
            rows = []
            for epoch in range(config.epochs_per_round):
                t_epoch = time.perf_counter()
                model = train_local(
                    model,
                    ctx.train_set,
                    TrainConfig(
                        learning_rate=config.learning_rate,
                        epochs=1,
                        batch_size=config.batch_size,
                        seed=_sub_seed(seed, _TRAIN, ctx.index, rnd, epoch),
                    ),
                )
                metrics = evaluate(model, ctx.eval_set)
                rows.append(
                    {
                        "round": rnd,
                        "epoch": epoch,
                        "worker": ctx.address,
                        "accuracy": metrics.accuracy,
                        "macro_precision": metrics.macro_precision,
                        "macro_recall": metrics.macro_recall,
                        "elapsed_ms": (time.perf_counter() - t_epoch) * 1000.0,
                    }
                )
            return model, rows

        for ctx, (model, rows) in zip(
            active_ctxs, _map_workers(config.parallel, train_phase, active_ctxs)
        ):
            ctx.model = model
            epoch_rows.extend(rows)

        # Phase 3: push this round's models (sealed per recipient when enabled).
        round_hashes: dict[str, ContentHash] = {}
        model_hashes: dict[str, str] = {}
        for ctx in active_ctxs:
            payload = serialize_model(ctx.model)
            model_hashes[ctx.address] = content_hash(payload)
            recipients = [a for a in active if a != ctx.address] + [REQUESTER]
            round_hashes[ctx.address] = push_model(ctx, payload, recipients)

        # Phase 4: score every peer model on the local held-out slice.
        def score_phase(ctx: _WorkerCtx) -> Optional[list[tuple[str, int]]]:
            behavior = ctx.behavior
            if behavior.kind == BEHAVIOR_NONSUBMITTER:
                if behavior.prob is not None:
                    if ctx.behavior_rng.random() < behavior.prob:
                        return None
                elif rnd >= behavior.from_round:
                    return None
            if behavior.kind == BEHAVIOR_INFLATED:
                entries = [(peer, behavior.floor_bp) for peer in active if peer != ctx.address]
                entries.append((ctx.address, MAX_BP))
                return sorted(entries)
            entries = []
            for owner in active:
                if owner == ctx.address:
                    continue
                peer_model = fetch_model(ctx.address, ctx.keys.private, round_hashes[owner])
                entries.append((owner, accuracy_bp(peer_model, ctx.eval_set)))
            return entries

        submissions = _map_workers(config.parallel, score_phase, active_ctxs)
        for ctx, entries in zip(active_ctxs, submissions):
            if entries is not None:
                ledger.submit_score(rnd, ctx.address, entries)

        # Phase 5: aggregate, slash, rank, pay, advance.
        matrix = ledger.get_submissions(rnd)
        if matrix.is_empty():
            raise RunAborted(f"round {rnd}: no worker submitted any scores")
        evaluators = set(matrix.evaluators())
        dishonest: set[str] = set(active) - evaluators
        if len(evaluators) >= 3:
            dishonest |= detect_dishonest(matrix, config.tolerance_bp, config.flag_fraction)
        dishonest &= set(ledger.active_workers())

        redistributions: dict[str, dict[str, int]] = {}
        for offender in sorted(dishonest):
            if ledger.workers[offender].deposit_held > 0:
                redistributions[offender] = ledger.forfeit_and_redistribute(offender)
            else:
                ledger.remove_worker(offender)
                redistributions[offender] = {}
        slashed_overall |= dishonest

        aggregates = aggregate_scores(matrix)
        remaining = ledger.active_workers()
        if not remaining:
            raise RunAborted(f"round {rnd}: every worker was slashed")
        ranked_pool = [a for a, _ in aggregates if a in remaining]
        ranked_pool += [a for a in remaining if a not in ranked_pool]
        ranking = ranked_pool[: min(config.top_k, len(remaining))]
        ledger.submit_round_topk(rnd, ranking)
        payouts = ledger.distribute_rewards(rnd)
        ledger.next_round()

        round_records.append(
            RoundRecord(
                round=rnd,
                model_hashes=model_hashes,
                submissions=matrix.to_jsonable(),
                aggregates=aggregates,
                ranking=ranking,
                payouts=payouts,
                flagged=sorted(dishonest),
                redistributions=redistributions,
                wall_ms=(time.perf_counter() - t_round) * 1000.0,
            ).to_dict()
        )
        prev_hashes = round_hashes

    # Final aggregation: the requester averages the last round's surviving models.
    survivors = ledger.active_workers()
    final_inputs = [
        fetch_model(REQUESTER, requester_keys.private, prev_hashes[owner])
        for owner in survivors
    ]
    final_model = average_models(final_inputs)
    final_bytes = serialize_model(final_model)
    final_hash = store.put(final_bytes)  # published in the clear: it is the product
    ledger.set_final_model(final_hash)
    ledger.close_task()

    final_metrics = evaluate(final_model, holdout)
    gc_removed = store.gc()

    summary = {
        "final_model_hash": final_hash,
        "final_accuracy": final_metrics.accuracy,
        "final_macro_precision": final_metrics.macro_precision,
        "final_macro_recall": final_metrics.macro_recall,
        "balances": {a: ledger.workers[a].balance for a in sorted(ledger.workers)},
        "refunds": {a: ledger.workers[a].refunded for a in sorted(ledger.workers)},
        "slashed": sorted(slashed_overall),
        "forfeit_pool": ledger.forfeit_pool,
        "reward_distributed": ledger.distributed_total,
        "deposits_paid_in": ledger.deposits_paid_in,
        "store_objects": len(store),
        "store_gc_removed": gc_removed,
        "total_wall_ms": (time.perf_counter() - t_run) * 1000.0,
    }
    report = RunReport(
        config=config.to_dict(),
        requester=REQUESTER,
        workers=[ctx.address for ctx in ctxs],
        rounds=round_records,
        epoch_rows=epoch_rows,
        summary=summary,
    )
    return RunOutcome(report=report, ledger=ledger, store=store, final_model=final_model)
