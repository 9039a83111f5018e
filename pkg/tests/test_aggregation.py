import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim.aggregation import ArchMismatch, EmptyList, average_models
from fedsim.learner import ModelState, init_model


def elementwise_mean_oracle(models):
    """Independent per-index accumulation loop, no numpy reductions."""
    size = len(models[0].params)
    out = np.zeros(size)
    for i in range(size):
        total = 0.0
        for m in models:
            total += float(m.params[i])
        out[i] = total / len(models)
    return out


def test_average_of_identical_models_is_identity():
    model = init_model([4, 3, 2], seed=1)
    mean = average_models([model.copy() for _ in range(4)])
    assert np.array_equal(mean.params, model.params)
    assert mean.arch == model.arch


def test_two_point_mean():
    a = ModelState((1, 1), np.array([0.0, 2.0]))
    b = ModelState((1, 1), np.array([2.0, 0.0]))
    assert np.array_equal(average_models([a, b]).params, np.array([1.0, 1.0]))


def test_matches_independent_oracle():
    rng = np.random.default_rng(42)
    models = []
    for _ in range(5):
        m = init_model([10, 8, 4], seed=int(rng.integers(1 << 31)))
        m.params += rng.standard_normal(len(m.params))
        models.append(m)
    mean = average_models(models)
    assert np.abs(mean.params - elementwise_mean_oracle(models)).max() <= 1e-12


def test_empty_list_rejected():
    with pytest.raises(EmptyList):
        average_models([])


def test_arch_mismatch_rejected():
    with pytest.raises(ArchMismatch):
        average_models([init_model([3, 2], seed=0), init_model([4, 2], seed=0)])


model_lists = st.integers(2, 6).flatmap(
    lambda k: st.lists(
        st.lists(
            st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False),
            min_size=4,
            max_size=4,
        ),
        min_size=k,
        max_size=k,
    )
)


@settings(max_examples=150)
@given(model_lists)
def test_permutation_tolerance(param_lists):
    models = [ModelState((1, 2), np.array(p)) for p in param_lists]
    forward = average_models(models).params
    backward = average_models(models[::-1]).params
    scale = np.maximum(1.0, np.abs(forward))
    assert (np.abs(forward - backward) / scale).max() <= 1e-12


@settings(max_examples=150)
@given(model_lists)
def test_bounding_box(param_lists):
    models = [ModelState((1, 2), np.array(p)) for p in param_lists]
    stacked = np.stack([m.params for m in models])
    mean = average_models(models).params
    eps = 1e-9 * np.maximum(1.0, np.abs(stacked).max())
    assert (mean >= stacked.min(axis=0) - eps).all()
    assert (mean <= stacked.max(axis=0) + eps).all()


def test_linearity_under_scaling():
    rng = np.random.default_rng(3)
    models = [
        ModelState((2, 2), rng.standard_normal(6)) for _ in range(4)
    ]
    base = average_models(models).params
    scaled = average_models(
        [ModelState(m.arch, m.params * 2.5) for m in models]
    ).params
    scale = np.maximum(1.0, np.abs(base * 2.5))
    assert (np.abs(scaled - base * 2.5) / scale).max() <= 1e-12
