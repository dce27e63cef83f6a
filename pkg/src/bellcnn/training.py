"""The training loop, evaluation, and training-summary plumbing.

Each epoch runs a fixed number of batches in a seeded deterministic
order; every batch does a train-mode forward, fused loss, backward, and
one Adam update per parameter tensor. Summary rows (and snapshots, when
a directory is configured) are emitted every `snapshot_interval` steps
and at the final step.

Batch loss/accuracy are measured on the just-processed batch before the
update, so step-1 values are meaningful. The summary clock defaults to a
null clock (wallclock_ms = 0) to keep repeated runs byte-identical; pass
a real clock for wall timing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import DatasetSplit, LabeledExample
from .errors import EmptyTrainSetError, ShapeMismatchError
from .freeze import freeze
from .model import ModelGraph, backward, forward, predict
from .optim import (
    AdamHyper,
    AdamState,
    adam_step,
    cross_entropy,
    softmax_cross_entropy,
)
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int
    epochs: int = 100
    batches_per_epoch: int = 7
    snapshot_interval: int = 100
    seed: int = 0
    adam: AdamHyper = field(default_factory=AdamHyper)
    snapshot_dir: Optional[str] = None

    def __post_init__(self):
        for name in ("batch_size", "epochs", "batches_per_epoch", "snapshot_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.batches_per_epoch


@dataclass(frozen=True)
class TrainingSummaryRow:
    step: int
    epoch: int
    loss: float
    accuracy: float
    wallclock_ms: int


class ListSink:
    """Collects summary rows in memory (tests, programmatic use)."""

    def __init__(self, clock: Optional[Callable[[], float]] = None):
        self.rows: list[TrainingSummaryRow] = []
        self._clock = clock
        self._start = clock() if clock else 0.0

    def emit(self, step: int, epoch: int, loss: float, accuracy: float):
        ms = int((self._clock() - self._start) * 1000) if self._clock else 0
        self.rows.append(TrainingSummaryRow(step, epoch, loss, accuracy, ms))


SUMMARY_HEADER = ("step", "epoch", "loss", "accuracy", "wallclock_ms")


class CsvSummarySink:
    """Appends rows to a CSV file, flushing per row so a crashed run's
    partial file still parses row by row."""

    def __init__(self, path, clock: Optional[Callable[[], float]] = None):
        self.path = Path(path)
        self._clock = clock
        self._start = clock() if clock else 0.0
        self._fh = open(self.path, "w", encoding="utf-8", newline="")
        self._fh.write(",".join(SUMMARY_HEADER) + "\n")
        self._fh.flush()

    def emit(self, step: int, epoch: int, loss: float, accuracy: float):
        ms = int((self._clock() - self._start) * 1000) if self._clock else 0
        self._fh.write(f"{step},{epoch},{loss!r},{accuracy!r},{ms}\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_summary(path) -> list[TrainingSummaryRow]:
    """Parse a summary CSV, tolerating a truncated trailing row."""
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != SUMMARY_HEADER:
            raise ValueError(f"{path}: not a training summary file")
        for row in reader:
            if len(row) != 5:
                continue  # partial trailing write
            try:
                rows.append(TrainingSummaryRow(int(row[0]), int(row[1]),
                                               float(row[2]), float(row[3]),
                                               int(row[4])))
            except ValueError:
                continue
    return rows


def _epoch_order(rng: np.random.Generator, n: int, needed: int) -> list[int]:
    """Seeded example order covering `needed` draws, reshuffling per pass."""
    order: list[int] = []
    while len(order) < needed:
        order.extend(int(i) for i in rng.permutation(n))
    return order[:needed]


def fit_model(g: ModelGraph, split: DatasetSplit, cfg: TrainConfig,
              summary_sink) -> ModelGraph:
    """Train the graph in place over the split's train examples."""
    train = list(split.train)
    if not train:
        raise EmptyTrainSetError("train split is empty")
    for ex in train:
        if ex.image.dims != g.input_shape:
            raise ShapeMismatchError(
                f"example {ex.subject_id}: image {ex.image.dims} vs "
                f"graph input {g.input_shape}")

    rng = np.random.default_rng(cfg.seed)
    states: dict[tuple[int, str], AdamState] = {
        (i, name): AdamState.initial(t) for i, name, t in g.parameters()}
    snapshot_dir = Path(cfg.snapshot_dir) if cfg.snapshot_dir else None
    if snapshot_dir:
        snapshot_dir.mkdir(parents=True, exist_ok=True)

    step = 0
    per_epoch = cfg.batches_per_epoch * cfg.batch_size
    for epoch in range(1, cfg.epochs + 1):
        order = _epoch_order(rng, len(train), per_epoch)
        for b in range(cfg.batches_per_epoch):
            batch = [train[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            step += 1

            sums: dict[tuple[int, str], np.ndarray] = {}
            loss_sum = 0.0
            correct = 0
            for ex in batch:
                logits, probs, caches = forward(g, ex.image, rng)
                loss, _ = softmax_cross_entropy(logits, ex.one_hot)
                loss_sum += loss
                if int(np.argmax(probs.array)) == ex.label:
                    correct += 1
                grads = backward(g, caches, ex.one_hot)
                for i, rec_grads in enumerate(grads):
                    if rec_grads is None:
                        continue
                    for name, tensor in (("weights", rec_grads.d_weights),
                                         ("bias", rec_grads.d_bias)):
                        key = (i, name)
                        if key in sums:
                            sums[key] += tensor.array
                        else:
                            sums[key] = tensor.array.copy()

            batch_loss = loss_sum / len(batch)
            batch_acc = correct / len(batch)
            for (i, name), total in sums.items():
                param = getattr(g.layers[i].layer, name)
                grad = Tensor(total / len(batch))
                new_param, states[(i, name)] = adam_step(
                    param, grad, states[(i, name)], cfg.adam)
                g.set_parameter(i, name, new_param)

            is_final = step == cfg.total_steps
            if step % cfg.snapshot_interval == 0 or is_final:
                summary_sink.emit(step, epoch, batch_loss, batch_acc)
                if snapshot_dir:
                    freeze(g, snapshot_dir / f"snap_{step}.bcnn")
    return g


@dataclass(frozen=True)
class EvalRow:
    subject_id: str
    predicted: int
    true_label: int


def evaluate(g: ModelGraph, examples: Sequence[LabeledExample]
             ) -> tuple[float, list[EvalRow]]:
    """Accuracy plus per-example predictions, in input order."""
    if not examples:
        raise EmptyTrainSetError("no examples to evaluate")
    rows = []
    correct = 0
    for ex in examples:
        cls, _ = predict(g, ex.image)
        rows.append(EvalRow(ex.subject_id, cls, ex.label))
        if cls == ex.label:
            correct += 1
    return correct / len(examples), rows


def format_eval_row(row: EvalRow) -> str:
    """Render as ``id P=<C|A> T=<0|1>``."""
    pred = "C" if row.predicted == 0 else "A"
    return f"{row.subject_id} P={pred} T={row.true_label}"


def mean_loss(g: ModelGraph, examples: Sequence[LabeledExample]) -> float:
    """Mean cross-entropy over examples on the inference path."""
    if not examples:
        raise EmptyTrainSetError("no examples to score")
    total = 0.0
    for ex in examples:
        _, probs = predict(g, ex.image)
        target = ex.one_hot if probs.dtype == np.float64 else ex.one_hot.astype(probs.dtype)
        total += cross_entropy(probs, target)
    return total / len(examples)


def smooth_series(values: Sequence[float], factor: float = 0.9) -> list[float]:
    """Exponential smoothing: s_0 = x_0, s_t = factor*s_(t-1) + (1-factor)*x_t."""
    out: list[float] = []
    for x in values:
        out.append(x if not out else factor * out[-1] + (1.0 - factor) * x)
    return out
