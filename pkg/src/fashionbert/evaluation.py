"""Matching accuracy and Rank@K cross-modal retrieval.

A *scorer* is any callable mapping a list of ``(text_id, image_id)`` pairs to
an array of match scores; :class:`ModelScorer` adapts a trained model.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import FashionBERT, score_pairs
from .training import PairedExample, ProductData

IMAGE_TO_TEXT = "image-to-text"
TEXT_TO_IMAGE = "text-to-image"
DIRECTIONS = (IMAGE_TO_TEXT, TEXT_TO_IMAGE)
REPORT_FIELDS = ["direction", "accuracy", "rank1", "rank5", "rank10", "query_count"]

Scorer = Callable[[Sequence[tuple[int, int]]], np.ndarray]


class ModelScorer:
    def __init__(self, model: FashionBERT, data: ProductData, batch_size: int = 128):
        self.model, self.data, self.batch_size = model, data, batch_size

    def __call__(self, pairs):
        items = [(self.data.texts[t], self.data.grids[i]) for t, i in pairs]
        return score_pairs(self.model, items, self.batch_size)


def matching_accuracy(scorer: Scorer, pairs: Sequence[PairedExample], threshold: float = 0.5) -> float:
    """Percentage of pairs whose thresholded score equals the label (a score
    equal to the threshold predicts a match)."""
    if not pairs:
        raise ValueError("matching accuracy needs at least one labelled pair")
    scores = np.asarray(scorer([(p.text_id, p.image_id) for p in pairs]))
    labels = np.array([p.label for p in pairs])
    return 100.0 * float(np.mean((scores >= threshold).astype(int) == labels))


def balanced_pairs(product_ids, rng: np.random.Generator) -> list[PairedExample]:
    """One positive and one random negative per product."""
    ids = list(product_ids)
    if len(ids) < 2:
        raise ValueError("need at least two products for negative pairs")
    out = []
    for k, pid in enumerate(ids):
        out.append(PairedExample(pid, pid, 1))
        j = int(rng.integers(len(ids) - 1))
        j += j >= k
        out.append(PairedExample(pid, ids[j], 0))
    return out


@dataclass
class RankSet:
    query: int
    candidates: list[int]  # product ids, in presentation order
    gt_index: int
    direction: str

    def pairs(self) -> list[tuple[int, int]]:
        """``(text_id, image_id)`` for every candidate."""
        if self.direction == IMAGE_TO_TEXT:
            return [(c, self.query) for c in self.candidates]
        return [(self.query, c) for c in self.candidates]


def build_rank_sets(
    product_ids, direction: str, query_count: int, distractor_count: int, rng: np.random.Generator
) -> list[RankSet]:
    """Unique queries, each with its ground truth hidden at a random slot among
    ``distractor_count`` candidates from other products."""
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    ids = np.array(sorted(product_ids))
    if len(ids) <= distractor_count:
        raise ValueError(f"{len(ids)} products cannot supply {distractor_count} distractors")
    if query_count > len(ids):
        raise ValueError(f"only {len(ids)} products for {query_count} unique queries")
    queries = rng.choice(ids, size=query_count, replace=False)
    sets = []
    for q in queries:
        others = ids[ids != q]
        cands = [int(c) for c in rng.choice(others, size=distractor_count, replace=False)]
        gt = int(rng.integers(distractor_count + 1))
        cands.insert(gt, int(q))
        sets.append(RankSet(int(q), cands, gt, direction))
    return sets


def rank_of_ground_truth(scores: np.ndarray, gt_index: int) -> int:
    """1-based rank under a stable descending sort."""
    s = np.asarray(scores)
    target = s[gt_index]
    return 1 + int(np.sum(s > target)) + int(np.sum(s[:gt_index] == target))


def score_rank_sets(rank_sets: Sequence[RankSet], scorer: Scorer) -> list[int]:
    flat = [p for rs in rank_sets for p in rs.pairs()]
    scores = np.asarray(scorer(flat))
    ranks, lo = [], 0
    for rs in rank_sets:
        hi = lo + len(rs.candidates)
        ranks.append(rank_of_ground_truth(scores[lo:hi], rs.gt_index))
        lo = hi
    return ranks


def rank_at_k(rank_sets: Sequence[RankSet], scorer: Scorer, k: int) -> float:
    if k < 1:
        raise ValueError("k must be at least 1")
    ranks = np.array(score_rank_sets(rank_sets, scorer))
    return 100.0 * float(np.mean(ranks <= k))


@dataclass
class RetrievalReport:
    direction: str
    accuracy: float
    rank1: float
    rank5: float
    rank10: float
    query_count: int

    def values(self) -> list:
        return [self.direction, self.accuracy, self.rank1, self.rank5, self.rank10, self.query_count]

    def line(self) -> str:
        vals = [f"{v:.2f}" if isinstance(v, float) else str(v) for v in self.values()]
        return " ".join(f"{k}={v}" for k, v in zip(REPORT_FIELDS, vals))


def retrieval_report(rank_sets: Sequence[RankSet], scorer: Scorer, accuracy: float) -> RetrievalReport:
    ranks = np.array(score_rank_sets(rank_sets, scorer))
    at = {k: 100.0 * float(np.mean(ranks <= k)) for k in (1, 5, 10)}
    return RetrievalReport(rank_sets[0].direction, accuracy, at[1], at[5], at[10], len(rank_sets))


def evaluate(
    scorer: Scorer,
    product_ids,
    seed: int = 0,
    query_count: int = 200,
    distractor_count: int = 100,
) -> list[RetrievalReport]:
    """Accuracy on balanced test pairs plus Rank@{1,5,10} in both directions."""
    rng = np.random.default_rng([seed, 0xE7A1])
    acc = matching_accuracy(scorer, balanced_pairs(product_ids, rng))
    reports = []
    for direction in DIRECTIONS:
        sets = build_rank_sets(product_ids, direction, query_count, distractor_count, rng)
        reports.append(retrieval_report(sets, scorer, acc))
    return reports


def write_reports(directory, reports: Sequence[RetrievalReport]) -> None:
    root = Path(directory)
    (root / "report.txt").write_text("".join(r.line() + "\n" for r in reports), encoding="utf-8")
    with open(root / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for r in reports:
            w.writerow(r.values())


def read_report_csv(path) -> list[RetrievalReport]:
    with open(path, newline="") as fh:
        return [
            RetrievalReport(row["direction"], float(row["accuracy"]), float(row["rank1"]),
                            float(row["rank5"]), float(row["rank10"]), int(row["query_count"]))
            for row in csv.DictReader(fh)
        ]
