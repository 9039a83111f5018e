import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim.config import DatasetConfig
from fedsim.learner import deserialize_model, evaluate, serialize_model
from fedsim.ledger import ScoreMatrix, replay_events
from fedsim.protocol import (
    EmptyMatrix,
    PushTracker,
    QuorumTooSmall,
    aggregate_scores,
    detect_dishonest,
    run_task,
    track_push,
)


# -- score aggregation ----------------------------------------------------------


def matrix(scores: dict) -> ScoreMatrix:
    return ScoreMatrix(0, scores)


def test_aggregate_floor_mean():
    grid = matrix({"w1": {"m": 9000}, "w2": {"m": 9200}, "m": {"w1": 1, "w2": 2}})
    aggregates = dict(aggregate_scores(grid))
    assert aggregates["m"] == 9100


def test_aggregate_tie_broken_by_address():
    grid = matrix(
        {
            "e1": {"w1": 9100, "w2": 9100},
            "e2": {"w1": 9100, "w2": 9100},
        }
    )
    assert aggregate_scores(grid) == [("w1", 9100), ("w2", 9100)]


def test_aggregate_ignores_self_scores():
    grid = matrix({"w1": {"w1": 10000, "w2": 4000}, "w2": {"w1": 6000}})
    aggregates = dict(aggregate_scores(grid))
    assert aggregates["w1"] == 6000  # the self 10000 does not count
    assert aggregates["w2"] == 4000


def test_aggregate_zero_when_no_peer_scores():
    grid = matrix({"w1": {"w1": 9999}})
    assert dict(aggregate_scores(grid))["w1"] == 0


def test_aggregate_empty_matrix():
    with pytest.raises(EmptyMatrix):
        aggregate_scores(matrix({}))


def brute_force_aggregate(scores):
    owners = sorted({m for row in scores.values() for m in row})
    out = []
    for owner in owners:
        values = [row[owner] for e, row in scores.items() if e != owner and owner in row]
        out.append((owner, sum(values) // len(values) if values else 0))
    return sorted(out, key=lambda item: (-item[1], item[0]))


@settings(max_examples=200)
@given(st.data())
def test_aggregate_matches_brute_force(data):
    addresses = [f"w{i}" for i in range(data.draw(st.integers(2, 6)))]
    scores = {}
    for evaluator in addresses:
        if not data.draw(st.booleans()):
            continue
        row = {}
        for owner in addresses:
            if data.draw(st.booleans()):
                row[owner] = data.draw(st.integers(0, 10000))
        if row:
            scores[evaluator] = row
    if not scores:
        scores = {addresses[0]: {addresses[1]: 5000}}
    got = aggregate_scores(matrix(scores))
    assert got == brute_force_aggregate(scores)


# -- dishonesty detection ---------------------------------------------------------


def test_detect_nothing_when_scores_agree():
    grid = matrix(
        {
            "w0": {"w1": 7000, "w2": 7050, "w3": 7100},
            "w1": {"w0": 7010, "w2": 7060, "w3": 7090},
            "w2": {"w0": 7020, "w1": 6990, "w3": 7080},
            "w3": {"w0": 7000, "w1": 7000, "w2": 7000},
        }
    )
    assert detect_dishonest(grid, 2000, 0.5) == set()


def test_detect_inflated_scorer_hand_fixture():
    # Hand-computed medians: w0 -> 7050, w1 -> 7020, w2 -> 7100, w3 -> 6950.
    # w3 deviates by >2900 bp on all three models it scored.
    grid = matrix(
        {
            "w0": {"w1": 7000, "w2": 7100, "w3": 6900},
            "w1": {"w0": 7050, "w2": 7000, "w3": 6950},
            "w2": {"w0": 6980, "w1": 7020, "w3": 7010},
            "w3": {"w0": 10000, "w1": 10000, "w2": 10000},
        }
    )
    assert detect_dishonest(grid, 2000, 0.5) == {"w3"}


def test_detect_non_submitter_from_grid():
    # w3's model is on the grid but w3 itself never evaluated anyone.
    grid = matrix(
        {
            "w0": {"w1": 7000, "w2": 7050, "w3": 7100},
            "w1": {"w0": 7010, "w2": 7060, "w3": 7090},
            "w2": {"w0": 7020, "w1": 6990, "w3": 7080},
        }
    )
    assert detect_dishonest(grid, 2000, 0.5) == {"w3"}


def test_detect_requires_quorum():
    grid = matrix({"w0": {"w1": 7000}, "w1": {"w0": 7000}})
    with pytest.raises(QuorumTooSmall):
        detect_dishonest(grid, 2000, 0.5)


# -- push tracker -------------------------------------------------------------------


def test_track_push_evicts_fifo():
    tracker = PushTracker(window=3)
    hashes = [f"{i:02d}" * 32 for i in range(4)]
    assert track_push(tracker, hashes[0]) == []
    assert track_push(tracker, hashes[1]) == []
    assert track_push(tracker, hashes[2]) == []
    assert track_push(tracker, hashes[3]) == [hashes[0]]
    assert tracker.pushed == hashes[1:]


def test_track_push_window_one():
    tracker = PushTracker(window=1)
    assert track_push(tracker, "a" * 64) == []
    assert track_push(tracker, "b" * 64) == ["a" * 64]


@settings(max_examples=100)
@given(st.integers(1, 6), st.lists(st.integers(0, 30), max_size=40))
def test_track_push_window_invariant(window, pushes):
    tracker = PushTracker(window=window)
    history = []
    evicted_total = []
    for value in pushes:
        digest = f"{value:064d}"
        history.append(digest)
        evicted_total.extend(track_push(tracker, digest))
        assert len(tracker.pushed) <= window
        assert tracker.pushed == history[-window:]
    if len(history) > window:
        assert evicted_total == history[:-window]
    else:
        assert evicted_total == []


# -- full runs ----------------------------------------------------------------------


def test_honest_run_distributes_and_refunds(tiny_config):
    outcome = run_task(tiny_config(rounds=2, reward=100))
    ledger = outcome.ledger
    summary = outcome.report.summary
    assert ledger.status.value == "Completed"
    assert sum(summary["balances"].values()) == 100
    assert summary["refunds"] == {"w0": 10, "w1": 10, "w2": 10}
    assert summary["slashed"] == []
    ledger.assert_conservation()


def test_nonsubmitter_slashed_and_deposit_split(tiny_config):
    outcome = run_task(tiny_config(behaviors=("honest", "honest", "nonsubmitter")))
    report = outcome.report
    assert report.rounds[0]["flagged"] == ["w2"]
    assert report.rounds[0]["redistributions"] == {"w2": {"w0": 5, "w1": 5}}
    assert outcome.report.summary["refunds"]["w2"] == 0
    outcome.ledger.assert_conservation()


def test_nonsubmitter_from_round(tiny_config):
    outcome = run_task(
        tiny_config(rounds=3, behaviors=("honest", "honest", "nonsubmitter:from=1"))
    )
    assert outcome.report.rounds[0]["flagged"] == []
    assert outcome.report.rounds[1]["flagged"] == ["w2"]


def test_inflated_scorer_slashed_and_excluded(tiny_config):
    outcome = run_task(
        tiny_config(
            workers=4,
            rounds=3,
            epochs_per_round=3,
            collateral=12,
            seed=9,
            dataset=DatasetConfig(n=400, d=16, classes=4, spread=0.3),
            behaviors=("honest", "honest", "honest", "inflated"),
        )
    )
    report = outcome.report
    assert report.rounds[0]["flagged"] == ["w3"]
    assert report.rounds[0]["redistributions"]["w3"] == {"w0": 4, "w1": 4, "w2": 4}
    for record in report.rounds:
        assert "w3" not in record["ranking"]
    for record in report.rounds[1:]:
        assert "w3" not in record["model_hashes"]  # out of training and averaging
    outcome.ledger.assert_conservation()


def test_encryption_transparency(tiny_config):
    plain = run_task(tiny_config(encrypt=False))
    sealed = run_task(tiny_config(encrypt=True))
    assert serialize_model(plain.final_model) == serialize_model(sealed.final_model)
    assert plain.report.fingerprint() == sealed.report.fingerprint()


def test_event_log_replay_from_run(tiny_config):
    outcome = run_task(tiny_config())
    replayed = replay_events(outcome.ledger.events)
    assert replayed.state_dict() == outcome.ledger.state_dict()


def test_rerun_reproduces_event_log(tiny_config):
    a = run_task(tiny_config(encrypt=True))
    b = run_task(tiny_config(encrypt=True))
    assert a.ledger.events == b.ledger.events
    assert a.report.fingerprint() == b.report.fingerprint()


def test_parallel_mode_matches_sequential(tiny_config):
    sequential = run_task(tiny_config(encrypt=True))
    parallel = run_task(tiny_config(encrypt=True, parallel=True))
    assert sequential.ledger.events == parallel.ledger.events
    assert sequential.report.fingerprint() == parallel.report.fingerprint()


def test_final_model_stored_and_closes_task(tiny_config):
    outcome = run_task(tiny_config())
    final_hash = outcome.ledger.final_model_uri
    stored = deserialize_model(outcome.store.get(final_hash))
    assert np.array_equal(stored.params, outcome.final_model.params)
    assert outcome.ledger.closed


def test_run_level_learning_monotonicity(tiny_config):
    config = tiny_config(rounds=4)
    outcome = run_task(config)
    # reconstruct the round-0 model of the first worker from the store log
    first_hash = outcome.report.rounds[0]["model_hashes"]["w0"]
    early = deserialize_model(outcome.store.get(first_hash))
    ds = _holdout_for(config)
    early_acc = evaluate(early, ds).accuracy
    assert outcome.report.summary["final_accuracy"] >= early_acc - 1e-9


def _holdout_for(config):
    from fedsim.learner import Dataset, generate_dataset
    from fedsim.protocol import _DATASET, _sub_seed

    ds = config.dataset
    full = generate_dataset(
        _sub_seed(config.seed, _DATASET),
        ds.n + config.holdout_n,
        ds.d,
        ds.classes,
        ds.spread,
    )
    return Dataset(full.features[ds.n :], full.labels[ds.n :])


def test_push_window_drives_store_gc(tiny_config):
    # 6 rounds with window 2 must evict and collect old round models.
    outcome = run_task(tiny_config(rounds=6, push_window=2))
    assert outcome.report.summary["store_gc_removed"] > 0
    # surviving objects are exactly the pinned ones
    assert all(outcome.store.pinned(h) for h in outcome.store.hashes())


def test_epoch_rows_shape(tiny_config):
    config = tiny_config(rounds=3, epochs_per_round=2)
    outcome = run_task(config)
    rows = outcome.report.epoch_rows
    assert len(rows) == 3 * 2 * 3  # workers x rounds x epochs
    keys = {
        "round",
        "epoch",
        "worker",
        "accuracy",
        "macro_precision",
        "macro_recall",
        "elapsed_ms",
    }
    assert all(set(row) == keys for row in rows)


def test_shared_testset_flag(tiny_config):
    outcome = run_task(tiny_config(shared_testset=True))
    assert outcome.ledger.status.value == "Completed"
