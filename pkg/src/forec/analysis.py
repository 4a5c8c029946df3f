"""Descriptive cross-market statistics: popularity vectors, similarity, star ratings."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Sequence

import numpy as np

from .data import InteractionRecord, MarketDataset


class UndefinedSimilarityError(ValueError):
    pass


@dataclass(frozen=True)
class MarketVector:
    market_code: str
    counts: np.ndarray


def item_count_vector(dataset: MarketDataset) -> MarketVector:
    """Interaction count per global item (zero where the market lacks the item)."""
    counts = np.bincount(dataset.items, minlength=dataset.n_items).astype(np.int64)
    return MarketVector(dataset.market_code, counts)


def cosine_similarity(a: MarketVector | np.ndarray, b: MarketVector | np.ndarray) -> float:
    va = np.asarray(a.counts if isinstance(a, MarketVector) else a, dtype=np.float64)
    vb = np.asarray(b.counts if isinstance(b, MarketVector) else b, dtype=np.float64)
    if va.shape != vb.shape:
        raise ValueError(f"vector lengths differ: {va.shape} vs {vb.shape}")
    aa, bb = float(va @ va), float(vb @ vb)
    if aa == 0 or bb == 0:
        raise UndefinedSimilarityError("cosine similarity undefined for a zero vector")
    # one sqrt of the product keeps integer cases exact: [1,2,0] vs [2,1,0] -> 4/sqrt(25)
    return float(va @ vb) / float(np.sqrt(aa * bb))


def similarity_matrix(datasets: Sequence[MarketDataset]) -> tuple[list[str], np.ndarray]:
    vectors = [item_count_vector(d) for d in datasets]
    codes = [v.market_code for v in vectors]
    mat = np.eye(len(vectors))
    for i, j in product(range(len(vectors)), repeat=2):
        if i < j:
            mat[i, j] = mat[j, i] = cosine_similarity(vectors[i], vectors[j])
    return codes, mat


@dataclass(frozen=True)
class RatingSummary:
    counts: dict[int, int]
    median: float
    mean: float
    n: int


def rating_distribution(records: Sequence[InteractionRecord]) -> RatingSummary:
    """Histogram over stars 1..5 (ratings rounded to the nearest star)."""
    ratings = np.array([r.rating for r in records], dtype=np.float64)
    if ratings.size and (ratings.min() < 1 or ratings.max() > 5):
        raise ValueError("ratings must lie in [1, 5]")
    stars = np.clip(np.floor(ratings + 0.5), 1, 5).astype(int)
    counts = {s: int((stars == s).sum()) for s in range(1, 6)}
    if ratings.size == 0:
        return RatingSummary(counts, float("nan"), float("nan"), 0)
    return RatingSummary(counts, float(np.median(ratings)), float(ratings.mean()), int(ratings.size))


def write_similarity_tsv(path, codes: list[str], mat: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("market\t" + "\t".join(codes) + "\n")
        for code, row in zip(codes, mat):
            fh.write(code + "\t" + "\t".join(f"{x:.6f}" for x in row) + "\n")


def write_rating_tsv(path, summaries: dict[str, RatingSummary]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("market\t1\t2\t3\t4\t5\tmedian\tmean\tn\n")
        for code, s in summaries.items():
            stars = "\t".join(str(s.counts[k]) for k in range(1, 6))
            fh.write(f"{code}\t{stars}\t{s.median:.4f}\t{s.mean:.4f}\t{s.n}\n")
