"""Seeded mini-batch SGD, evaluation and exhaustive grid search."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg.blas import daxpy

from .data.manifest import Manifest
from .metrics import MetricsReport, confusion_metrics
from .models import FCapsNetConfig, Model, build_model
from .runtime import substream

log = logging.getLogger(__name__)

RECONSTRUCTION_GRID = (0.5, 0.05, 0.005, 0.0005, 0.00005, 0.0)
LEARNING_RATE_GRID = (0.1, 0.01, 1e-3, 1e-4, 1e-5)


class NonFiniteError(FloatingPointError):
    def __init__(self, tensor: str, epoch: int, step: int):
        super().__init__(f"non-finite values in {tensor} at epoch {epoch}, step {step}")
        self.tensor = tensor


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class TrainRun:
    seed: int = 0
    lr: float = 1e-5
    epochs: int = 10
    batch_size: int = 16
    balanced: bool = True
    history: list[EpochRecord] = field(default_factory=list)
    report: MetricsReport | None = None

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def _as_arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, Manifest):
        if len(data) == 0:
            raise ValueError("training manifest is empty")
        return data.load_images(), data.targets()
    images, labels = data
    images, labels = np.asarray(images, dtype=np.float64), np.asarray(labels, dtype=int)
    if len(images) == 0 or len(images) != len(labels):
        raise ValueError(f"need matching non-empty images/labels, got {len(images)} and {len(labels)}")
    return images, labels


def _first_non_finite(model: Model, loss: float) -> str | None:
    for name, p in model.named_parameters().items():
        if not np.all(np.isfinite(p.data)):
            return name
    for name, p in model.named_parameters().items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return f"{name}.grad"
    return None if np.isfinite(loss) else "loss"


def sgd_update(param: np.ndarray, grad: np.ndarray, lr: float) -> None:
    """``param -= lr * grad`` in place without a temporary (BLAS axpy on contiguous data)."""
    if lr == 0.0:
        return
    if param.flags.c_contiguous and grad.flags.c_contiguous and param.dtype == grad.dtype == np.float64:
        daxpy(grad.reshape(-1), param.reshape(-1), a=-lr)
    else:
        param -= lr * grad


class _ClassCycle:
    """Endless stream of one class's indices, reshuffled after every pass."""

    def __init__(self, indices: np.ndarray, rng: np.random.Generator):
        self.indices, self.rng = indices, rng
        self.queue = np.empty(0, dtype=int)

    def take(self, k: int) -> np.ndarray:
        while self.queue.size < k:
            self.queue = np.concatenate([self.queue, self.rng.permutation(self.indices)])
        out, self.queue = self.queue[:k], self.queue[k:]
        return out


def epoch_batches(labels: np.ndarray, batch_size: int, balanced: bool, order_rng, pairing: list | None) -> list[np.ndarray]:
    """Index batches for one epoch.

    Balanced batches hold ``batch_size // 2`` class-0 and the rest class-1
    samples, drawn from per-class cycles (``pairing``), so the minority class is
    revisited within an epoch. An epoch has ``ceil(n / batch_size)`` steps either way.
    """
    n = len(labels)
    steps = -(-n // batch_size)
    if not balanced or pairing is None:
        perm = order_rng.permutation(n)
        return [perm[s * batch_size : (s + 1) * batch_size] for s in range(steps)]
    half = batch_size // 2
    return [np.concatenate([pairing[0].take(half), pairing[1].take(batch_size - half)]) for _ in range(steps)]


def train(model: Model, data, run: TrainRun, on_epoch=None) -> TrainRun:
    """Plain SGD on ``data`` (a manifest or an ``(images, labels)`` pair).

    With ``run.balanced`` and both classes present, every batch is half
    no-alcohol and half alcohol (``pairing`` substream); otherwise batches are a
    fresh permutation each epoch (``shuffle`` substream). Dropout draws from the
    ``dropout`` substream. Appends one :class:`EpochRecord` per epoch and
    returns ``run``.
    """
    images, labels = _as_arrays(data)
    order_rng = substream(run.seed, "shuffle")
    dropout_rng = substream(run.seed, "dropout")
    pairing = None
    if run.balanced and run.batch_size > 1 and len(np.unique(labels)) == 2:
        pairing = [_ClassCycle(np.flatnonzero(labels == c), substream(run.seed, "pairing", c)) for c in (0, 1)]
    params = model.parameters()
    for epoch in range(len(run.history) + 1, len(run.history) + run.epochs + 1):
        total, correct, seen = 0.0, 0, 0
        for step, idx in enumerate(epoch_batches(labels, run.batch_size, run.balanced, order_rng, pairing)):
            model.zero_grad()
            loss, scores = model.loss_and_scores(images[idx], labels[idx], rng=dropout_rng, gate=True)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteError(_first_non_finite(model, value) or "loss", epoch, step)
            loss.backward()
            for p in params:
                if p.grad is not None:
                    sgd_update(p.data, p.grad, run.lr)
            bad = _first_non_finite(model, value)
            if bad is not None:
                raise NonFiniteError(bad, epoch, step)
            total += value
            correct += int(np.sum(scores.argmax(axis=1) == labels[idx]))
            seen += len(idx)
        rec = EpochRecord(epoch, total / seen, correct / seen)
        run.history.append(rec)
        log.info("epoch %d loss %.6f acc %.4f", rec.epoch, rec.loss, rec.accuracy)
        if on_epoch is not None:
            on_epoch(rec)
    model.zero_grad()
    return run


def predict(model: Model, data, batch_size: int = 32) -> np.ndarray:
    images, _ = _as_arrays(data)
    return model.predict_scores(images, batch_size).argmax(axis=1)


def evaluate(model: Model, data, batch_size: int = 32) -> MetricsReport:
    images, labels = _as_arrays(data)
    return confusion_metrics(model.predict_scores(images, batch_size).argmax(axis=1), labels)


# ---------------------------------------------------------------- grid search

GRID_AXES = ("capsules", "routing", "kernel", "filters", "reconstruction_weight", "lr")


@dataclass(frozen=True)
class GridRow:
    index: int
    settings: dict
    parameters: int
    report: MetricsReport

    @property
    def accuracy(self) -> float:
        return self.report.accuracy


def apply_settings(config: FCapsNetConfig, settings: dict) -> FCapsNetConfig:
    mapping = {"capsules": "num_capsules", "routing": "routing_iterations", "kernel": "kernel_size", "filters": "filters"}
    kwargs = {mapping[k]: v for k, v in settings.items() if k in mapping}
    if "reconstruction_weight" in settings:
        kwargs["loss"] = replace(config.loss, reconstruction_weight=settings["reconstruction_weight"])
    return replace(config, **kwargs)


def expand_space(space: dict) -> list[dict]:
    unknown = set(space) - set(GRID_AXES)
    if unknown:
        raise ValueError(f"unknown grid axes {sorted(unknown)}; allowed {GRID_AXES}")
    keys = [k for k in GRID_AXES if k in space]
    if not keys or any(len(space[k]) == 0 for k in keys):
        raise ValueError("grid space is empty")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(space[k] for k in keys))]


def grid_search(
    space: dict,
    train_data,
    val_data,
    architecture: str = "fcapsnet",
    base_config: FCapsNetConfig | None = None,
    run: TrainRun | None = None,
    on_row=None,
) -> tuple[GridRow, list[GridRow]]:
    """Train every combination; best = highest validation accuracy, then fewer parameters, then lower index.

    Returns the best row and all rows sorted by that same ordering.
    """
    base_config = base_config or FCapsNetConfig()
    run = run or TrainRun()
    combos = expand_space(space)
    train_arrays, val_arrays = _as_arrays(train_data), _as_arrays(val_data)
    rows = []
    for i, settings in enumerate(combos):
        config = apply_settings(base_config, settings)
        model = build_model(architecture, config, seed=run.seed)
        this_run = replace(run, lr=settings.get("lr", run.lr), history=[], report=None)
        train(model, train_arrays, this_run)
        row = GridRow(i, settings, model.num_parameters(), evaluate(model, val_arrays))
        rows.append(row)
        if on_row is not None:
            on_row(row)
    rows.sort(key=lambda r: (-r.accuracy, r.parameters, r.index))
    return rows[0], rows

