"""Variable sequence length inference and latency benchmarking.

The padded path pads every text span to ``max_text_len``; the VSL path pads
only to the longest text in the batch. Self-attention work scales with the
square of the sequence width, so short texts get cheaper.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .image import PatchGrid
from .model import Batch, FashionBERT, ModelConfig, assemble_input, collate
from .text import TokenSequence

BENCH_FIELDS = ["mode", "batch_size", "mean_ms", "p50_ms", "p95_ms"]


@dataclass
class VslBatch:
    batch: Batch
    lengths: np.ndarray  # true sequence length per example: text + patches + 2

    @property
    def width(self) -> int:
        return self.batch.width


def _inputs(texts, grids, config: ModelConfig):
    if len(texts) != len(grids):
        raise ValueError(f"{len(texts)} texts but {len(grids)} patch grids")
    return [assemble_input(t, g, 1, config) for t, g in zip(texts, grids)]


def vsl_assemble(texts: Sequence[TokenSequence], grids: Sequence[PatchGrid], config: ModelConfig, dtype=np.float32) -> VslBatch:
    inputs = _inputs(texts, grids, config)
    batch = collate(inputs, dtype=dtype)
    return VslBatch(batch, np.array([x.seq_len for x in inputs]))


def padded_assemble(texts, grids, config: ModelConfig, dtype=np.float32) -> Batch:
    return collate(_inputs(texts, grids, config), text_width=config.max_text_len, dtype=dtype)


def vsl_score(model: FashionBERT, batch: VslBatch) -> np.ndarray:
    return model.score(batch.batch)


def attention_cells(batch: Batch) -> int:
    """Elements in one layer's attention score matrices (per head)."""
    return batch.size * batch.width * batch.width


@dataclass
class LatencyStats:
    mode: str
    batch_size: int
    mean_ms: float
    p50_ms: float
    p95_ms: float

    def values(self) -> list:
        return [self.mode, self.batch_size, self.mean_ms, self.p50_ms, self.p95_ms]


def bench_latency(
    model: FashionBERT,
    pairs: Sequence[tuple[TokenSequence, PatchGrid]],
    mode: str,
    repetitions: int = 10,
    batch_size: int = 32,
    warmup: int = 3,
) -> LatencyStats:
    """Wall-clock time per batch over ``repetitions`` passes of ``pairs``;
    the first ``warmup`` passes are discarded."""
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    if mode not in ("padded", "vsl"):
        raise ValueError(f"unknown mode {mode!r}")
    chunks = [pairs[i : i + batch_size] for i in range(0, len(pairs), batch_size)]
    if not chunks:
        raise ValueError("no pairs to benchmark")
    timings = []
    for rep in range(warmup + repetitions):
        for chunk in chunks:
            texts = [t for t, _ in chunk]
            grids = [g for _, g in chunk]
            start = time.perf_counter()
            if mode == "vsl":
                vsl_score(model, vsl_assemble(texts, grids, model.config, model.dtype))
            else:
                model.score(padded_assemble(texts, grids, model.config, model.dtype))
            elapsed = (time.perf_counter() - start) * 1000.0
            if rep >= warmup:
                timings.append(elapsed)
    t = np.array(timings)
    return LatencyStats(mode, batch_size, float(t.mean()), float(np.percentile(t, 50)), float(np.percentile(t, 95)))


def write_bench_csv(path, stats: Sequence[LatencyStats]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_FIELDS)
        for s in stats:
            w.writerow(s.values())
