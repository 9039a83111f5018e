"""Model averaging: the single aggregation rule of the protocol."""

from __future__ import annotations

import numpy as np

from .learner import ModelState


class AggregationError(Exception):
    pass


class EmptyList(AggregationError):
    pass


class ArchMismatch(AggregationError):
    pass


def average_models(models: list[ModelState]) -> ModelState:
    """Unweighted element-wise mean of the parameter vectors.

    Accumulation runs in float64 in list order, so permuting the inputs may
    move the result by rounding noise but nothing more.
    """
    if not models:
        raise EmptyList("cannot average zero models")
    arch = tuple(models[0].arch)
    for m in models[1:]:
        if tuple(m.arch) != arch:
            raise ArchMismatch(f"arch {tuple(m.arch)} != {arch}")
    acc = np.zeros_like(models[0].params)
    for m in models:
        acc += m.params
    acc /= len(models)
    return ModelState(arch, acc)
