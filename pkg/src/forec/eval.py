"""Leave-one-out ranking evaluation: HR@k, nDCG@k, user groups, data-size ablation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats

from .data import NegativeSampler, SamplingError, SplitDataset, truncate_train

N_EVAL_NEGATIVES = 99


@dataclass(frozen=True)
class RankingResult:
    user: int
    rank: int
    n_candidates: int = N_EVAL_NEGATIVES + 1


@dataclass
class MetricReport:
    hr: float
    ndcg: float
    k: int
    n_users: int
    per_user: dict[int, tuple[int, float, float]] = field(default_factory=dict)  # user -> (rank, hr, ndcg)
    excluded: list[int] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def ndcg_vector(self, users: Sequence[int] | None = None) -> np.ndarray:
        users = sorted(self.per_user) if users is None else users
        return np.array([self.per_user[u][2] for u in users])


def rank_from_scores(test_score: float, negative_scores) -> int:
    """1 + number of negatives scoring at least as high as the held-out item.

    Ties count against the held-out item.
    """
    neg = np.asarray(negative_scores, dtype=np.float64)
    if math.isnan(test_score) or np.isnan(neg).any():
        raise ValueError("NaN score")
    return 1 + int(np.count_nonzero(neg >= test_score))


def rank_heldout(model, user: int, test_item: int, negatives: Sequence[int]) -> RankingResult:
    items = np.array([test_item, *negatives], dtype=np.int64)
    scores = model.forward(np.full(items.shape, user, dtype=np.int64), items)
    return RankingResult(user, rank_from_scores(scores[0], scores[1:]), len(items))


def hr_at_k(rank: int, k: int = 10) -> int:
    return int(rank <= k)


def ndcg_at_k(rank: int, k: int = 10) -> float:
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def eval_negatives(split: SplitDataset, seed: int, n: int = N_EVAL_NEGATIVES) -> tuple[dict[int, list[int]], list[int]]:
    """Per-user evaluation negatives over the global vocabulary, plus users lacking enough items."""
    sampler = NegativeSampler(split.known_positives, split.n_items, None, seed)
    out, skipped = {}, []
    for u in split.users:
        try:
            out[u] = sampler.sample_eval(u, n)
        except SamplingError:
            skipped.append(u)
    return out, skipped


def evaluate(model, split: SplitDataset, negatives: dict[int, list[int]] | NegativeSampler | None = None,
             k: int = 10, target: str = "test", users: Iterable[int] | None = None, seed: int = 0) -> MetricReport:
    """Mean HR@k / nDCG@k over users, each ranking its held-out item against its negatives.

    ``target`` selects the held-out item ("test" or "valid"). Users whose
    candidates cannot be scored are excluded and listed in the report.
    """
    excluded: list[int] = []
    if negatives is None:
        negatives, excluded = eval_negatives(split, seed)
    elif isinstance(negatives, NegativeSampler):
        sampler, negatives = negatives, {}
        for u in split.users:
            try:
                negatives[u] = sampler.sample_eval(u)
            except SamplingError:
                excluded.append(u)
    held = split.test if target == "test" else split.valid
    chosen = sorted(split.users if users is None else users)
    chosen = [u for u in chosen if u in negatives]
    per_user = {}
    if chosen:
        n_cand = 1 + len(negatives[chosen[0]])
        cand = np.array([[held[u], *negatives[u]] for u in chosen], dtype=np.int64)
        us = np.repeat(np.array(chosen, dtype=np.int64), n_cand)
        scores = np.asarray(model.forward(us, cand.reshape(-1)), dtype=np.float64).reshape(len(chosen), n_cand)
        for u, row in zip(chosen, scores):
            if np.isnan(row).any():
                excluded.append(u)
                continue
            r = rank_from_scores(row[0], row[1:])
            per_user[u] = (r, float(hr_at_k(r, k)), ndcg_at_k(r, k))
    n = len(per_user)
    hr = sum(v[1] for v in per_user.values()) / n if n else float("nan")
    nd = sum(v[2] for v in per_user.values()) / n if n else float("nan")
    return MetricReport(hr, nd, k, n, per_user, sorted(excluded))


def user_groups(split: SplitDataset, n_groups: int = 5) -> list[list[int]]:
    """Users sorted by train size (ties by index), cut into equal groups; remainder goes to the warmest."""
    users = sorted(split.users, key=lambda u: (len(split.train[u]), u))
    if len(users) < n_groups:
        raise ValueError(f"need at least {n_groups} users, have {len(users)}")
    size = len(users) // n_groups
    groups = [users[g * size:(g + 1) * size] for g in range(n_groups - 1)]
    groups.append(users[(n_groups - 1) * size:])
    return groups


def user_group_report(model, split: SplitDataset, negatives=None, n_groups: int = 5, k: int = 10,
                      seed: int = 0) -> list[MetricReport]:
    full = evaluate(model, split, negatives, k, seed=seed)
    reports = []
    for g, members in enumerate(user_groups(split, n_groups)):
        rows = [full.per_user[u] for u in members if u in full.per_user]
        n = len(rows)
        rep = MetricReport(sum(r[1] for r in rows) / n if n else float("nan"),
                           sum(r[2] for r in rows) / n if n else float("nan"), k, n,
                           {u: full.per_user[u] for u in members if u in full.per_user})
        rep.meta = {"group": g, "mean_train_size": float(np.mean([len(split.train[u]) for u in members]))}
        reports.append(rep)
    return reports


def target_size_ablation(pipeline: Callable[[SplitDataset], object], split: SplitDataset,
                         fractions: Sequence[float] = (1.0, 0.5, 0.25, 0.1), negatives=None, k: int = 10,
                         seed: int = 0) -> list[tuple[float, MetricReport]]:
    """Retrain ``pipeline`` on per-user truncated target data and evaluate each.

    The candidate lists stay fixed across fractions.
    """
    if negatives is None:
        negatives, _ = eval_negatives(split, seed)
    out = []
    for f in fractions:
        sub, flagged = truncate_train(split, f)
        model = pipeline(sub)
        rep = evaluate(model, sub, negatives, k)
        rep.meta = {"fraction": f, "flagged_users": flagged, "n_train": sub.n_train}
        out.append((f, rep))
    return out


def paired_ttest(a: MetricReport, b: MetricReport) -> tuple[float, float]:
    """Paired Student's t-test over per-user nDCG of two runs on the same users."""
    users = sorted(set(a.per_user) & set(b.per_user))
    t, p = stats.ttest_rel(a.ndcg_vector(users), b.ndcg_vector(users))
    return float(t), float(p)


def format_table(rows: Sequence[tuple[str, MetricReport]]) -> str:
    width = max([len(name) for name, _ in rows] + [6])
    lines = [f"{'run':<{width}}  HR@k    nDCG@k  users"]
    for name, r in rows:
        lines.append(f"{name:<{width}}  {r.hr:.4f}  {r.ndcg:.4f}  {r.n_users}")
    return "\n".join(lines)


def write_report_tsv(path, rows: Sequence[tuple[str, MetricReport]], meta: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in sorted((meta or {}).items()):
            fh.write(f"# {key}\t{value}\n")
        fh.write("run\tk\thr\tndcg\tn_users\tn_excluded\n")
        for name, r in rows:
            fh.write(f"{name}\t{r.k}\t{r.hr:.6f}\t{r.ndcg:.6f}\t{r.n_users}\t{len(r.excluded)}\n")


def write_per_user_tsv(path, report: MetricReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user\trank\thr\tndcg\n")
        for u in sorted(report.per_user):
            r, h, n = report.per_user[u]
            fh.write(f"{u}\t{r}\t{int(h)}\t{n:.6f}\n")
