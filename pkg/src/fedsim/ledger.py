"""In-process replica of the task smart contract.

One ``TaskLedger`` instance holds the full task state: status machine,
worker registry with collateral deposits, per-round score submissions,
top-K rankings, reward payouts, and token balances. Every mutating
operation is validated in full before any state changes, runs under a
single serialization point, and appends one record to an append-only
event log. Replaying that log from scratch reproduces the ledger exactly.

Event records are JSON-ready dicts:

    {"seq": int, "op": str, "args": {...}, "result": ... | {"error": name}}

Token accounting identity, preserved by every operation:

    total_reward + deposits paid in
        == balances + refunds + forfeit_pool + deposits still held
           + undistributed reward
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Optional

ContentHash = str
Address = str

REQUESTER_DEFAULT = "requester"


class LedgerError(Exception):
    pass


class ZeroReward(LedgerError):
    pass


class InvalidParams(LedgerError):
    pass


class AlreadyRegistered(LedgerError):
    pass


class WrongDeposit(LedgerError):
    pass


class TaskAlreadyRunning(LedgerError):
    pass


class NotEnoughWorkers(LedgerError):
    pass


class WrongStatus(LedgerError):
    pass


class DuplicateSubmission(LedgerError):
    pass


class StaleRound(LedgerError):
    pass


class UnknownWorker(LedgerError):
    pass


class InactiveWorker(LedgerError):
    pass


class ScoreOutOfRange(LedgerError):
    pass


class FutureRound(LedgerError):
    pass


class AlreadyRanked(LedgerError):
    pass


class BadRankLength(LedgerError):
    pass


class AlreadyDistributed(LedgerError):
    pass


class NoRanking(LedgerError):
    pass


class AlreadyInactive(LedgerError):
    pass


class NoDeposit(LedgerError):
    pass


class RewardsPending(LedgerError):
    pass


class NotCompleted(LedgerError):
    pass


class NotRequester(LedgerError):
    pass


class NoFinalModel(LedgerError):
    pass


class ReplayMismatch(LedgerError):
    pass


class TaskStatus(Enum):
    CREATED = "Created"
    RUNNING = "Running"
    COMPLETED = "Completed"


MAX_SCORE_BP = 10000


def round_budgets(total_reward: int, num_rounds: int) -> list[int]:
    """Split the task reward over rounds: floor share, remainder in the last."""
    base = total_reward // num_rounds
    budgets = [base] * num_rounds
    budgets[-1] = total_reward - base * (num_rounds - 1)
    return budgets


def split_reward(budget: int, ranks: int) -> list[int]:
    """Geometric halving over ranks 1..ranks; the last rank absorbs the remainder.

    Rank i gets floor(budget / 2**i), so the top rank gets half; the payout
    always sums to the budget exactly.
    """
    if ranks < 1:
        raise InvalidParams("need at least one rank to split a reward")
    shares = [budget // (2 ** i) for i in range(1, ranks + 1)]
    shares[-1] += budget - sum(shares)
    return shares


@dataclass
class WorkerRecord:
    address: Address
    deposit_held: int
    active: bool = True
    flag_count: int = 0
    balance: int = 0
    refunded: int = 0
    public_key: Optional[str] = None


@dataclass
class ScoreMatrix:
    """Evaluator x model grid of basis-point scores; missing cells are absent."""

    round: int
    scores: dict[Address, dict[Address, int]] = field(default_factory=dict)

    def evaluators(self) -> list[Address]:
        return sorted(self.scores)

    def owners(self) -> list[Address]:
        seen: set[Address] = set()
        for entries in self.scores.values():
            seen.update(entries)
        return sorted(seen)

    def cell(self, evaluator: Address, owner: Address) -> Optional[int]:
        return self.scores.get(evaluator, {}).get(owner)

    def is_empty(self) -> bool:
        return not self.scores

    def to_jsonable(self) -> dict:
        return {e: dict(sorted(row.items())) for e, row in sorted(self.scores.items())}


class TaskLedger:
    """Smart-contract state machine; construct via :func:`initialize_task`."""

    def __init__(
        self,
        model_uri: ContentHash,
        num_rounds: int,
        total_reward: int,
        collateral: int,
        top_k: int,
        requester: Address,
    ):
        self.status = TaskStatus.CREATED
        self.model_uri = model_uri
        self.num_rounds = num_rounds
        self.current_round = 0
        self.total_reward = total_reward
        self.budgets = round_budgets(total_reward, num_rounds)
        self.collateral = collateral
        self.top_k = top_k
        self.requester = requester
        self.workers: dict[Address, WorkerRecord] = {}
        self.submissions: dict[int, dict[Address, list[tuple[Address, int]]]] = {}
        self.rankings: dict[int, list[Address]] = {}
        self.payouts: dict[int, dict[Address, int]] = {}
        self.forfeit_pool = 0
        self.final_model_uri: Optional[ContentHash] = None
        self.closed = False
        self.deposits_paid_in = 0
        self.refunded_total = 0
        self.distributed_total = 0
        self.redistributed_total = 0
        self.events: list[dict] = []
        self._lock = threading.RLock()

    # -- event log ---------------------------------------------------------

    def _commit(self, op: str, args: dict, fn: Callable[[], Any]) -> Any:
        with self._lock:
            try:
                result = fn()
            except LedgerError as exc:
                self.events.append(
                    {
                        "seq": len(self.events),
                        "op": op,
                        "args": args,
                        "result": {"error": type(exc).__name__},
                    }
                )
                raise
            self.events.append(
                {"seq": len(self.events), "op": op, "args": args, "result": result}
            )
            return result

    # -- helpers -----------------------------------------------------------

    def _worker(self, address: Address) -> WorkerRecord:
        record = self.workers.get(address)
        if record is None:
            raise UnknownWorker(f"{address!r} is not registered")
        return record

    def _active_worker(self, address: Address) -> WorkerRecord:
        record = self._worker(address)
        if not record.active:
            raise InactiveWorker(f"{address!r} is not active")
        return record

    def active_workers(self) -> list[Address]:
        return sorted(a for a, w in self.workers.items() if w.active)

    def worker_public_key(self, address: Address) -> Optional[str]:
        return self._worker(address).public_key

    def _require_requester(self, caller: Optional[Address]) -> None:
        if caller is not None and caller != self.requester:
            raise NotRequester(f"{caller!r} is not the task requester")

    # -- operations --------------------------------------------------------

    def join_task(
        self, address: Address, deposit: int, public_key: Optional[str] = None
    ) -> ContentHash:
        """Register a worker with its collateral; returns the model URI."""

        def run() -> ContentHash:
            if self.status is not TaskStatus.CREATED:
                raise TaskAlreadyRunning(f"cannot join a task in status {self.status.value}")
            if address == self.requester:
                raise InvalidParams("the requester cannot join its own task as a worker")
            if address in self.workers:
                raise AlreadyRegistered(f"{address!r} already joined")
            if deposit != self.collateral:
                raise WrongDeposit(f"deposit {deposit} != required collateral {self.collateral}")
            self.workers[address] = WorkerRecord(address, deposit, public_key=public_key)
            self.deposits_paid_in += deposit
            return self.model_uri

        return self._commit(
            "join_task",
            {"address": address, "deposit": deposit, "public_key": public_key},
            run,
        )

    def start_task(self) -> None:
        def run() -> None:
            if self.status is not TaskStatus.CREATED:
                raise WrongStatus(f"cannot start a task in status {self.status.value}")
            if len(self.active_workers()) < 2:
                raise NotEnoughWorkers("at least 2 workers must join before starting")
            self.status = TaskStatus.RUNNING
            self.current_round = 0
            return None

        return self._commit("start_task", {}, run)

    def submit_score(
        self, round: int, evaluator: Address, entries: Iterable[tuple[Address, int]]
    ) -> None:
        entries = [(str(owner), int(bp)) for owner, bp in entries]

        def run() -> None:
            if self.status is not TaskStatus.RUNNING:
                raise WrongStatus(f"cannot submit scores in status {self.status.value}")
            if round != self.current_round:
                raise StaleRound(f"submission for round {round}, current is {self.current_round}")
            self._active_worker(evaluator)
            bucket = self.submissions.setdefault(self.current_round, {})
            if evaluator in bucket:
                raise DuplicateSubmission(f"{evaluator!r} already submitted this round")
            seen: set[Address] = set()
            for owner, bp in entries:
                self._active_worker(owner)
                if not 0 <= bp <= MAX_SCORE_BP:
                    raise ScoreOutOfRange(f"score {bp} outside [0, {MAX_SCORE_BP}]")
                if owner in seen:
                    raise InvalidParams(f"duplicate entry for model owner {owner!r}")
                seen.add(owner)
            bucket[evaluator] = entries
            return None

        return self._commit(
            "submit_score",
            {
                "round": round,
                "evaluator": evaluator,
                "entries": [[o, b] for o, b in entries],
            },
            run,
        )

    def get_submissions(self, round: int) -> ScoreMatrix:
        """Read-only snapshot of a round's submissions (not event-logged)."""
        with self._lock:
            if round < 0:
                raise InvalidParams(f"round index {round} is negative")
            if round > self.current_round:
                raise FutureRound(f"round {round} is ahead of current {self.current_round}")
            grid = {
                evaluator: {owner: bp for owner, bp in entries}
                for evaluator, entries in self.submissions.get(round, {}).items()
            }
            return ScoreMatrix(round, grid)

    def submit_round_topk(
        self, round: int, ranked: list[Address], caller: Optional[Address] = None
    ) -> None:
        ranked = list(ranked)

        def run() -> None:
            self._require_requester(caller)
            if self.status is not TaskStatus.RUNNING:
                raise WrongStatus(f"cannot rank in status {self.status.value}")
            if round != self.current_round:
                raise StaleRound(f"ranking for round {round}, current is {self.current_round}")
            if round in self.rankings:
                raise AlreadyRanked(f"round {round} already has a ranking")
            expected = min(self.top_k, len(self.active_workers()))
            if expected == 0 or len(ranked) != expected or len(set(ranked)) != len(ranked):
                raise BadRankLength(
                    f"ranking must list {expected} distinct workers, got {len(ranked)}"
                )
            for address in ranked:
                self._active_worker(address)
            self.rankings[round] = ranked
            return None

        return self._commit(
            "submit_round_topk", {"round": round, "ranked": ranked, "caller": caller}, run
        )

    def distribute_rewards(self, round: int) -> dict[Address, int]:
        def run() -> dict[Address, int]:
            ranking = self.rankings.get(round)
            if ranking is None:
                raise NoRanking(f"no ranking recorded for round {round}")
            if round in self.payouts:
                raise AlreadyDistributed(f"round {round} rewards already distributed")
            shares = split_reward(self.budgets[round], len(ranking))
            payout = dict(zip(ranking, shares))
            for address, amount in payout.items():
                self.workers[address].balance += amount
            self.payouts[round] = payout
            self.distributed_total += sum(shares)
            return payout

        return self._commit("distribute_rewards", {"round": round}, run)

    def remove_worker(self, address: Address) -> int:
        """Voluntary exit. Pre-start (and post-completion) exits refund the
        deposit; leaving a running task forfeits it to the pool."""

        def run() -> int:
            record = self._worker(address)
            if not record.active:
                raise AlreadyInactive(f"{address!r} already left")
            record.active = False
            deposit = record.deposit_held
            record.deposit_held = 0
            if self.status is TaskStatus.RUNNING:
                self.forfeit_pool += deposit
                return 0
            record.refunded += deposit
            self.refunded_total += deposit
            return deposit

        return self._commit("remove_worker", {"address": address}, run)

    def forfeit_and_redistribute(self, offender: Address) -> dict[Address, int]:
        """Slash a worker: seize its deposit and split it equally among the
        remaining active workers (floor shares, remainder to the lowest
        address)."""

        def run() -> dict[Address, int]:
            record = self._worker(offender)
            if not record.active:
                raise AlreadyInactive(f"{offender!r} already inactive")
            if record.deposit_held <= 0:
                raise NoDeposit(f"{offender!r} holds no deposit to forfeit")
            deposit = record.deposit_held
            record.deposit_held = 0
            record.active = False
            record.flag_count += 1
            survivors = self.active_workers()
            if not survivors:
                self.forfeit_pool += deposit
                return {}
            base, remainder = divmod(deposit, len(survivors))
            payout = {address: base for address in survivors}
            payout[survivors[0]] += remainder
            for address, amount in payout.items():
                self.workers[address].balance += amount
            self.redistributed_total += deposit
            return {a: v for a, v in payout.items() if v}

        return self._commit("forfeit_and_redistribute", {"offender": offender}, run)

    def next_round(self) -> int:
        def run() -> int:
            if self.status is not TaskStatus.RUNNING:
                raise WrongStatus(f"cannot advance a task in status {self.status.value}")
            if self.current_round not in self.payouts:
                raise RewardsPending(f"round {self.current_round} rewards not yet distributed")
            self.current_round += 1
            if self.current_round == self.num_rounds:
                self.status = TaskStatus.COMPLETED
            return self.current_round

        return self._commit("next_round", {}, run)

    def set_final_model(self, model_uri: ContentHash, caller: Optional[Address] = None) -> None:
        def run() -> None:
            self._require_requester(caller)
            if self.status is not TaskStatus.COMPLETED:
                raise NotCompleted(f"cannot set the final model in status {self.status.value}")
            if self.final_model_uri is not None:
                raise InvalidParams("final model already set")
            self.final_model_uri = model_uri
            return None

        return self._commit(
            "set_final_model", {"model_uri": model_uri, "caller": caller}, run
        )

    def close_task(self) -> ContentHash:
        """Refund the deposits of workers still active and return the final URI."""

        def run() -> ContentHash:
            if self.status is not TaskStatus.COMPLETED:
                raise NotCompleted(f"cannot close a task in status {self.status.value}")
            if self.closed:
                raise WrongStatus("task already closed")
            if self.final_model_uri is None:
                raise NoFinalModel("the final model hash was never recorded")
            for address in self.active_workers():
                record = self.workers[address]
                record.refunded += record.deposit_held
                self.refunded_total += record.deposit_held
                record.deposit_held = 0
            self.closed = True
            return self.final_model_uri

        return self._commit("close_task", {}, run)

    # -- audit -------------------------------------------------------------

    def conservation_terms(self) -> tuple[int, int]:
        """(tokens in, tokens accounted for); equal in every reachable state."""
        with self._lock:
            tokens_in = self.total_reward + self.deposits_paid_in
            balances = sum(w.balance for w in self.workers.values())
            held = sum(w.deposit_held for w in self.workers.values())
            undistributed = self.total_reward - self.distributed_total
            accounted = (
                balances + self.refunded_total + self.forfeit_pool + held + undistributed
            )
            return tokens_in, accounted

    def assert_conservation(self) -> None:
        tokens_in, accounted = self.conservation_terms()
        if tokens_in != accounted:
            raise AssertionError(
                f"token conservation violated: {tokens_in} in, {accounted} accounted"
            )

    def state_dict(self) -> dict:
        """Canonical JSON-able snapshot of the full ledger state."""
        with self._lock:
            return {
                "status": self.status.value,
                "model_uri": self.model_uri,
                "num_rounds": self.num_rounds,
                "current_round": self.current_round,
                "total_reward": self.total_reward,
                "budgets": list(self.budgets),
                "collateral": self.collateral,
                "top_k": self.top_k,
                "requester": self.requester,
                "final_model_uri": self.final_model_uri,
                "closed": self.closed,
                "forfeit_pool": self.forfeit_pool,
                "deposits_paid_in": self.deposits_paid_in,
                "refunded_total": self.refunded_total,
                "distributed_total": self.distributed_total,
                "redistributed_total": self.redistributed_total,
                "workers": {
                    a: {
                        "deposit_held": w.deposit_held,
                        "active": w.active,
                        "flag_count": w.flag_count,
                        "balance": w.balance,
                        "refunded": w.refunded,
                        "public_key": w.public_key,
                    }
                    for a, w in sorted(self.workers.items())
                },
                "submissions": {
                    str(r): {e: [[o, b] for o, b in ent] for e, ent in sorted(sub.items())}
                    for r, sub in sorted(self.submissions.items())
                },
                "rankings": {str(r): list(v) for r, v in sorted(self.rankings.items())},
                "payouts": {
                    str(r): dict(sorted(p.items())) for r, p in sorted(self.payouts.items())
                },
            }


def initialize_task(
    model_uri: ContentHash,
    num_rounds: int,
    total_reward: int,
    collateral: int,
    top_k: int,
    requester: Address = REQUESTER_DEFAULT,
) -> TaskLedger:
    """Create a task ledger; the reward escrow is paid in by the requester."""
    if num_rounds < 1:
        raise InvalidParams(f"num_rounds must be >= 1, got {num_rounds}")
    if top_k < 1:
        raise InvalidParams(f"top_k must be >= 1, got {top_k}")
    if total_reward <= 0:
        raise ZeroReward(f"total_reward must be positive, got {total_reward}")
    if collateral < 0:
        raise InvalidParams(f"collateral must be >= 0, got {collateral}")
    ledger = TaskLedger(model_uri, num_rounds, total_reward, collateral, top_k, requester)
    ledger.events.append(
        {
            "seq": 0,
            "op": "initialize_task",
            "args": {
                "model_uri": model_uri,
                "num_rounds": num_rounds,
                "total_reward": total_reward,
                "collateral": collateral,
                "top_k": top_k,
                "requester": requester,
            },
            "result": None,
        }
    )
    return ledger


# -- event log I/O and replay ------------------------------------------------


def write_event_log(events: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in events:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_event_log(path: str | Path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def replay_events(events: list[dict]) -> TaskLedger:
    """Re-execute a recorded event log from scratch.

    Raises ReplayMismatch if the log does not start with initialization, an
    operation errors differently than recorded, or a recorded error fails to
    reproduce.
    """
    if not events or events[0]["op"] != "initialize_task":
        raise ReplayMismatch("event log must start with initialize_task")
    ledger = initialize_task(**events[0]["args"])

    def dispatch(op: str, args: dict) -> Any:
        if op == "join_task":
            return ledger.join_task(args["address"], args["deposit"], args.get("public_key"))
        if op == "start_task":
            return ledger.start_task()
        if op == "submit_score":
            entries = [(o, b) for o, b in args["entries"]]
            return ledger.submit_score(args["round"], args["evaluator"], entries)
        if op == "submit_round_topk":
            return ledger.submit_round_topk(args["round"], args["ranked"], args.get("caller"))
        if op == "distribute_rewards":
            return ledger.distribute_rewards(args["round"])
        if op == "remove_worker":
            return ledger.remove_worker(args["address"])
        if op == "forfeit_and_redistribute":
            return ledger.forfeit_and_redistribute(args["offender"])
        if op == "next_round":
            return ledger.next_round()
        if op == "set_final_model":
            return ledger.set_final_model(args["model_uri"], args.get("caller"))
        if op == "close_task":
            return ledger.close_task()
        raise ReplayMismatch(f"unknown operation {op!r} in event log")

    for record in events[1:]:
        expected = record["result"]
        expects_error = isinstance(expected, dict) and "error" in expected
        try:
            result = dispatch(record["op"], record["args"])
        except LedgerError as exc:
            if not expects_error or type(exc).__name__ != expected["error"]:
                raise ReplayMismatch(
                    f"seq {record['seq']}: {record['op']} raised {type(exc).__name__}, "
                    f"log recorded {expected!r}"
                ) from exc
        else:
            if expects_error:
                raise ReplayMismatch(
                    f"seq {record['seq']}: {record['op']} succeeded, log recorded {expected!r}"
                )
            if json.loads(json.dumps(result)) != expected:
                raise ReplayMismatch(
                    f"seq {record['seq']}: {record['op']} returned {result!r}, "
                    f"log recorded {expected!r}"
                )
    return ledger
