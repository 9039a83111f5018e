"""Small native learner: synthetic blob datasets and an MLP trained by SGD.

The model is a fully connected ReLU network with a softmax cross-entropy
loss, stored as a flat float64 parameter vector (weights row-major, then
biases, per layer). Everything is deterministic given the seeds handed in;
no global RNG state is touched.

Serialized model layout (all integers little-endian):

    bytes 0..3    magic ``FMOD``
    byte  4       format version, 0x01
    bytes 5..6    u16 layer count L
    bytes 7..10   u32 reserved (zero)
    bytes 11..15  zero padding (header is 16 bytes total)
    next 4*L      u32 layer sizes
    next 8*P      P float64 parameters in fixed layer order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MODEL_MAGIC = b"FMOD"
MODEL_VERSION = 1
_HEADER = struct.Struct("<4sBHI5x")  # 16 bytes

assert _HEADER.size == 16


class LearnerError(Exception):
    pass


class InvalidParams(LearnerError):
    pass


class BadArch(LearnerError):
    pass


class DimMismatch(LearnerError):
    pass


class NonFiniteLoss(LearnerError):
    pass


class EmptyTestset(LearnerError):
    pass


class CorruptModelBytes(LearnerError):
    pass


@dataclass
class ModelState:
    arch: tuple[int, ...]
    params: np.ndarray  # flat float64 vector

    def copy(self) -> "ModelState":
        return ModelState(tuple(self.arch), self.params.copy())


@dataclass
class Dataset:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64 in [0, classes)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    macro_precision: float
    macro_recall: float


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 3
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise InvalidParams("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise InvalidParams("batch_size must be >= 1")


def param_count(arch: tuple[int, ...] | list[int]) -> int:
    return sum(arch[i] * arch[i + 1] + arch[i + 1] for i in range(len(arch) - 1))


def generate_dataset(seed: int, n: int, d: int, classes: int, spread: float) -> Dataset:
    """Gaussian blobs around class means drawn on the unit sphere.

    Labels are balanced within one count of each other; rows are shuffled so
    any contiguous slice mixes classes. Deterministic given the seed.
    """
    if classes < 1 or n < classes or d < 1 or spread < 0:
        raise InvalidParams(
            f"need n >= classes >= 1, d >= 1, spread >= 0; got n={n} classes={classes} d={d} spread={spread}"
        )
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((classes, d))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    counts = np.full(classes, n // classes)
    counts[: n % classes] += 1
    labels = np.repeat(np.arange(classes, dtype=np.int64), counts)
    labels = labels[rng.permutation(n)]
    features = means[labels] + rng.standard_normal((n, d)) * spread
    return Dataset(features, labels)


def partition_even(dataset: Dataset, workers: int, seed: int) -> list[Dataset]:
    """Seeded shuffle, then contiguous shards whose sizes differ by <= 1."""
    if workers < 1:
        raise InvalidParams("workers must be >= 1")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    sizes = np.full(workers, n // workers)
    sizes[: n % workers] += 1
    shards = []
    start = 0
    for size in sizes:
        idx = perm[start : start + size]
        shards.append(Dataset(dataset.features[idx].copy(), dataset.labels[idx].copy()))
        start += size
    return shards


def init_model(arch: tuple[int, ...] | list[int], seed: int) -> ModelState:
    """Glorot-uniform weights, zero biases."""
    arch = tuple(int(a) for a in arch)
    if len(arch) < 2 or any(a < 1 for a in arch):
        raise BadArch(f"arch needs >= 2 positive layer sizes, got {arch}")
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in zip(arch, arch[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ModelState(arch, np.concatenate(chunks))


def unpack_params(model: ModelState) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views into the flat vector as per-layer (weights, bias) pairs."""
    expected = param_count(model.arch)
    if model.params.shape != (expected,):
        raise BadArch(f"params length {model.params.shape} does not match arch {model.arch}")
    layers = []
    offset = 0
    for fan_in, fan_out in zip(model.arch, model.arch[1:]):
        w = model.params[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = model.params[offset : offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def _forward(layers, x: np.ndarray) -> np.ndarray:
    """Logits for a batch; ReLU on all hidden layers."""
    a = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        a = a @ w + b
        if i != last:
            np.maximum(a, 0.0, out=a)
    return a


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def batch_loss(model: ModelState, features: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy over the batch."""
    probs = softmax(_forward(unpack_params(model), features))
    return float(-np.mean(np.log(probs[np.arange(len(labels)), labels])))


def batch_gradient(model: ModelState, features: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss plus the analytic gradient as a flat vector matching ``params``."""
    layers = unpack_params(model)
    activations = [features]
    a = features
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        a = a @ w + b
        if i != last:
            a = np.maximum(a, 0.0)
        activations.append(a)
    probs = softmax(activations[-1])
    n = len(labels)
    loss = float(-np.mean(np.log(probs[np.arange(n), labels])))

    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    grads: list[np.ndarray] = []
    for i in range(last, -1, -1):
        w, _ = layers[i]
        a_in = activations[i]
        gw = a_in.T @ delta
        gb = delta.sum(axis=0)
        grads.append(gb)
        grads.append(gw.ravel())
        if i > 0:
            delta = delta @ w.T
            delta[activations[i] <= 0.0] = 0.0
    grads.reverse()
    return loss, np.concatenate(grads)


def train_local(model: ModelState, shard: Dataset, config: TrainConfig) -> ModelState:
    """Mini-batch SGD; returns a new model, the input is left untouched.

    Batches come from a fresh per-epoch shuffle of the shard drawn from a
    generator seeded with ``config.seed``. Raises NonFiniteLoss the moment
    the loss or any parameter stops being finite.
    """
    if shard.features.shape[1] != model.arch[0]:
        raise DimMismatch(
            f"shard dim {shard.features.shape[1]} != model input dim {model.arch[0]}"
        )
    out = model.copy()
    rng = np.random.default_rng(config.seed)
    n = len(shard)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grad = batch_gradient(out, shard.features[idx], shard.labels[idx])
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"training diverged (loss={loss})")
            out.params -= config.learning_rate * grad
            if not np.isfinite(out.params).all():
                raise NonFiniteLoss("non-finite parameter after SGD step")
    return out


def predict(model: ModelState, features: np.ndarray) -> np.ndarray:
    if features.shape[1] != model.arch[0]:
        raise DimMismatch(
            f"feature dim {features.shape[1]} != model input dim {model.arch[0]}"
        )
    return np.argmax(_forward(unpack_params(model), features), axis=1)


def confusion_matrix(model: ModelState, testset: Dataset) -> np.ndarray:
    classes = model.arch[-1]
    if len(testset) and (testset.labels.min() < 0 or testset.labels.max() >= classes):
        raise DimMismatch(f"labels outside [0, {classes}) for this model")
    preds = predict(model, testset.features)
    grid = np.bincount(
        testset.labels * classes + preds, minlength=classes * classes
    ).reshape(classes, classes)
    return grid


def evaluate(model: ModelState, testset: Dataset) -> Metrics:
    """Accuracy and macro precision/recall from one confusion matrix.

    Per-class 0/0 ratios count as 0 before macro averaging.
    """
    if len(testset) == 0:
        raise EmptyTestset("cannot evaluate on an empty testset")
    grid = confusion_matrix(model, testset)
    diag = np.diag(grid).astype(np.float64)
    pred_totals = grid.sum(axis=0).astype(np.float64)
    label_totals = grid.sum(axis=1).astype(np.float64)
    precision = np.divide(diag, pred_totals, out=np.zeros_like(diag), where=pred_totals > 0)
    recall = np.divide(diag, label_totals, out=np.zeros_like(diag), where=label_totals > 0)
    return Metrics(
        accuracy=float(diag.sum() / grid.sum()),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
    )


def accuracy_bp(model: ModelState, testset: Dataset) -> int:
    """Accuracy in integer basis points, computed without float rounding."""
    if len(testset) == 0:
        raise EmptyTestset("cannot score on an empty testset")
    correct = int((predict(model, testset.features) == testset.labels).sum())
    return correct * 10000 // len(testset)


def serialize_model(model: ModelState) -> bytes:
    layers = len(model.arch)
    expected = param_count(model.arch)
    if model.params.shape != (expected,):
        raise BadArch(f"params length {model.params.shape} does not match arch {model.arch}")
    header = _HEADER.pack(MODEL_MAGIC, MODEL_VERSION, layers, 0)
    sizes = struct.pack(f"<{layers}I", *model.arch)
    body = np.ascontiguousarray(model.params, dtype="<f8").tobytes()
    return header + sizes + body


def deserialize_model(data: bytes) -> ModelState:
    if len(data) < _HEADER.size:
        raise CorruptModelBytes("truncated header")
    magic, version, layers, reserved = _HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise CorruptModelBytes(f"bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise CorruptModelBytes(f"unsupported version {version}")
    if reserved != 0 or any(data[11:16]):
        raise CorruptModelBytes("reserved header bytes must be zero")
    if layers < 2:
        raise CorruptModelBytes(f"layer count {layers} below minimum of 2")
    offset = _HEADER.size
    if len(data) < offset + 4 * layers:
        raise CorruptModelBytes("truncated layer table")
    arch = struct.unpack_from(f"<{layers}I", data, offset)
    if any(a < 1 for a in arch):
        raise CorruptModelBytes(f"non-positive layer size in {arch}")
    offset += 4 * layers
    expected = param_count(arch)
    if len(data) != offset + 8 * expected:
        raise CorruptModelBytes(
            f"body length {len(data) - offset} != {8 * expected} expected from arch {arch}"
        )
    params = np.frombuffer(data, dtype="<f8", count=expected, offset=offset).astype(np.float64)
    return ModelState(tuple(int(a) for a in arch), params)
