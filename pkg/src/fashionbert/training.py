"""Pair sampling, Adam with warmup/linear decay, and the adaptive-weight
training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import adaptive
from .image import PatchGrid, apply_patch_mask
from .model import FashionBERT, TaskLosses, assemble_input, collate, save_checkpoint
from .text import TokenSequence, apply_wwm_mask

log = logging.getLogger(__name__)

TASKS = ("mlm", "mpm", "tia")
LOG_HEADER = ["step", "l_mlm", "l_mpm", "l_tia", "w_mlm", "w_mpm", "w_tia", "lr"]


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.95
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    warmup_steps: int = 100
    total_steps: int = 2000
    negative_ratio: float = 1.0  # negatives per positive
    text_mask_prob: float = 0.15
    patch_mask_prob: float = 0.10
    seed: int = 0
    weighting: str = "adaptive"
    eval_every: int = 100
    patience: int = 5
    debug: bool = False

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        for name in ("text_mask_prob", "patch_mask_prob"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        if self.negative_ratio < 0:
            raise ValueError("negative_ratio must be non-negative")
        if self.weighting not in ("adaptive", "fixed"):
            raise ValueError(f"weighting must be 'adaptive' or 'fixed', got {self.weighting!r}")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        # ~10 epochs of 260,480 pairs at batch 64
        base = dict(batch_size=64, learning_rate=2e-5, beta1=0.95, beta2=0.999, weight_decay=1e-4,
                    warmup_steps=5000, total_steps=40_700)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class PairedExample:
    text_id: int
    image_id: int
    label: int


@dataclass
class ProductData:
    """Tokenized descriptions and patch grids keyed by product id."""

    texts: dict[int, TokenSequence]
    grids: dict[int, PatchGrid]

    def pair(self, ex: PairedExample) -> tuple[TokenSequence, PatchGrid]:
        return self.texts[ex.text_id], self.grids[ex.image_id]


def sample_batch(product_ids, config: TrainConfig, rng: np.random.Generator) -> list[PairedExample]:
    """Positives pair a product with itself; each negative pairs a text with
    the image of a different, uniformly drawn product."""
    ids = np.asarray(product_ids)
    n_pos = max(1, int(round(config.batch_size / (1.0 + config.negative_ratio))))
    n_neg = config.batch_size - n_pos
    if n_neg > 0 and len(ids) < 2:
        raise ValueError("negative sampling needs at least two products")
    batch = [PairedExample(int(p), int(p), 1) for p in ids[rng.integers(len(ids), size=n_pos)]]
    for _ in range(n_neg):
        t = rng.integers(len(ids))
        i = rng.integers(len(ids) - 1)
        i += i >= t  # uniform over the other products
        batch.append(PairedExample(int(ids[t]), int(ids[i]), 0))
    order = rng.permutation(len(batch))
    return [batch[k] for k in order]


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to the base rate, then linear decay to 0."""
    base = config.learning_rate
    if step <= 0:
        return 0.0
    if step < config.warmup_steps:
        return base * step / config.warmup_steps
    if step >= config.total_steps:
        return 0.0
    span = config.total_steps - config.warmup_steps
    return base * (config.total_steps - step) / span if span else base


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params, grads: dict[str, np.ndarray], state: AdamState, lr: float, config: TrainConfig) -> None:
    """One Adam step with decoupled weight decay on matrices (not biases or
    layer-norm vectors). Updates ``params`` in place."""
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        if config.weight_decay and p.ndim >= 2:
            update = update + config.weight_decay * p.data
        p.data -= (lr * update).astype(p.dtype)


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, task: str, snapshot: str | None):
        where = f"; parameters saved to {snapshot}" if snapshot else ""
        super().__init__(f"non-finite {task} loss at step {step}{where}")
        self.step, self.task, self.snapshot = step, task, snapshot


def build_inputs(model: FashionBERT, data: ProductData, examples, config: TrainConfig, rng: np.random.Generator):
    # every example is masked, whatever its label, so masking cannot leak the label
    inputs = []
    for ex in examples:
        text, grid = data.pair(ex)
        masked_text = apply_wwm_mask(text, config.text_mask_prob, rng)
        masked_grid = apply_patch_mask(grid, config.patch_mask_prob, rng)
        inputs.append(assemble_input(masked_text, masked_grid, ex.label, model.config))
    return collate(inputs, dtype=model.dtype)


def compute_weights(losses: TaskLosses, mode: str) -> np.ndarray:
    if mode == "fixed":
        return adaptive.uniform_weights(len(TASKS))
    signals = [adaptive.normalize_signal(x) for x in losses.as_tuple()]
    return adaptive.solve_weights(signals)


def train_step(
    model: FashionBERT,
    examples: list[PairedExample],
    data: ProductData,
    state: AdamState,
    config: TrainConfig,
    rng: np.random.Generator,
    snapshot_dir=None,
) -> tuple[TaskLosses, np.ndarray, float]:
    """Forward all three tasks, weight them, and apply one Adam update.

    Returns the task losses, the weights used and the learning rate.
    """
    batch = build_inputs(model, data, examples, config, rng)
    model.zero_grad()
    terms = model.task_losses(batch)
    losses = TaskLosses(*(float(t.data) for t in terms))
    step = state.step + 1
    for task, value in zip(TASKS, losses.as_tuple()):
        if not math.isfinite(value):
            snapshot = None
            if snapshot_dir is not None:
                snapshot = str(Path(snapshot_dir) / f"nonfinite_step{step}.bin")
                save_checkpoint(snapshot, model)
            raise NonFiniteLossError(step, task, snapshot)
    weights = compute_weights(losses, config.weighting)
    if config.debug and config.weighting == "adaptive":
        signals = [adaptive.normalize_signal(x) for x in losses.as_tuple()]
        assert abs(weights.sum() - 1.0) <= 1e-12 and np.all(weights >= 0)
        assert adaptive.stationarity_residual(signals, weights) <= 1e-10
    total = adaptive.aggregate_loss(terms, weights)
    total.backward()
    lr = lr_schedule(step, config)
    adam_update(model.params, {k: p.grad for k, p in model.params.items()}, state, lr, config)
    return losses, weights, lr


@dataclass
class StepLog:
    step: int
    losses: TaskLosses
    weights: np.ndarray
    lr: float

    def row(self) -> list[str]:
        vals = [*self.losses.as_tuple(), *self.weights, self.lr]
        return [str(self.step)] + [repr(float(v)) for v in vals]


def write_log(path, rows: list[StepLog]) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_HEADER)
            for r in rows:
                w.writerow(r.row())
    except OSError as exc:
        raise OSError(f"cannot write training log {path}: {exc}") from exc


def read_log(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


@dataclass
class TrainResult:
    model: FashionBERT
    log: list[StepLog]
    validation: list[tuple[int, float]]
    best_step: int
    stopped_early: bool


def run_training(
    model: FashionBERT,
    data: ProductData,
    train_ids,
    config: TrainConfig,
    validate: Callable[[FashionBERT], float] | None = None,
    snapshot_dir=None,
    progress: Callable[[StepLog], None] | None = None,
) -> TrainResult:
    """Train until ``total_steps`` or until ``validate`` (an accuracy, higher
    is better) fails to improve for ``patience`` evaluations. The returned
    model carries the best-validated parameters."""
    rng = np.random.default_rng([config.seed, 0x7A1])
    state = AdamState()
    rows: list[StepLog] = []
    history: list[tuple[int, float]] = []
    best_acc, best_step, best_params, stale = -1.0, 0, None, 0
    stopped = False
    for step in range(1, config.total_steps + 1):
        examples = sample_batch(train_ids, config, rng)
        losses, weights, lr = train_step(model, examples, data, state, config, rng, snapshot_dir)
        rows.append(StepLog(step, losses, weights, lr))
        if progress is not None:
            progress(rows[-1])
        if validate is not None and (step % config.eval_every == 0 or step == config.total_steps):
            acc = validate(model)
            history.append((step, acc))
            log.info("step %d val accuracy %.2f%%", step, acc)
            if acc > best_acc:
                best_acc, best_step, stale = acc, step, 0
                best_params = {k: p.data.copy() for k, p in model.params.items()}
            else:
                stale += 1
                if stale >= config.patience:
                    stopped = True
                    break
    model.zero_grad()
    if best_params is not None:
        for k, arr in best_params.items():
            model.params[k].data = arr
    else:
        best_step = len(rows)
    return TrainResult(model, rows, history, best_step, stopped)


def prepare_products(records, vocab, grid: int, max_text: int) -> ProductData:
    """Tokenize descriptions and extract patch grids for product records."""
    from .image import image_to_grid
    from .text import tokenize

    texts = {r.product_id: tokenize(r.description, vocab, max_text - 2) for r in records}
    grids = {r.product_id: image_to_grid(r.image, grid) for r in records}
    return ProductData(texts, grids)
