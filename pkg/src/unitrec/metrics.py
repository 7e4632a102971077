"""Ranking metrics: MRR, NDCG@k and HR@k with binary relevance.

With several relevant candidates, MRR averages the reciprocal rank over all of
them and HR@k divides the hits by ``min(k, n_relevant)`` (MIND convention).
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

METRIC_NAMES = ("MRR", "NDCG@5", "NDCG@10", "HR@5", "HR@10")


@dataclass(frozen=True)
class LabeledRanking:
    ranks: tuple[int, ...]
    relevant: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        object.__setattr__(self, "relevant", tuple(sorted({int(i) for i in self.relevant})))
        m = len(self.ranks)
        if sorted(self.ranks) != list(range(1, m + 1)):
            raise ValueError("ranks must be a permutation of 1..M")
        if not self.relevant:
            raise ValueError("at least one relevant candidate is required")
        if self.relevant[0] < 0 or self.relevant[-1] >= m:
            raise ValueError(f"relevant indices must lie in [0, {m})")

    def relevant_ranks(self) -> list[int]:
        return sorted(self.ranks[i] for i in self.relevant)


def mrr(r: LabeledRanking) -> float:
    ranks = r.relevant_ranks()
    return sum(1.0 / k for k in ranks) / len(ranks)


def _check_k(k: int) -> None:
    if k < 1:
        raise ValueError(f"cutoff k must be >= 1, got {k}")


def ndcg_at_k(r: LabeledRanking, k: int) -> float:
    _check_k(k)
    ranks = r.relevant_ranks()
    dcg = sum(1.0 / math.log2(rank + 1) for rank in ranks if rank <= k)
    ideal = sum(1.0 / math.log2(i + 1) for i in range(1, min(k, len(ranks)) + 1))
    return dcg / ideal


def hr_at_k(r: LabeledRanking, k: int) -> float:
    _check_k(k)
    ranks = r.relevant_ranks()
    hits = sum(1 for rank in ranks if rank <= k)
    return hits / min(k, len(ranks))


def instance_metrics(r: LabeledRanking) -> dict[str, float]:
    return {
        "MRR": mrr(r),
        "NDCG@5": ndcg_at_k(r, 5),
        "NDCG@10": ndcg_at_k(r, 10),
        "HR@5": hr_at_k(r, 5),
        "HR@10": hr_at_k(r, 10),
    }


def aggregate_metrics(per_instance: Iterable[dict[str, float]]) -> dict[str, dict[str, float]]:
    """Unweighted mean of each metric, as a fraction and as a percentage."""
    records = list(per_instance)
    if not records:
        raise ValueError("aggregate_metrics needs at least one instance")
    names = list(records[0])
    fraction = {name: math.fsum(rec[name] for rec in records) / len(records) for name in names}
    return {
        "fraction": fraction,
        "percent": {name: 100.0 * v for name, v in fraction.items()},
        "count": {"instances": len(records)},
    }


def random_baseline(n_candidates: int) -> dict[str, float]:
    """Expected metrics for one relevant item under a uniformly random permutation."""
    m = n_candidates
    if m < 1:
        raise ValueError("need at least one candidate")

    def ndcg(k):
        return sum(1.0 / math.log2(r + 1) for r in range(1, min(k, m) + 1)) / m

    return {
        "MRR": sum(1.0 / r for r in range(1, m + 1)) / m,
        "NDCG@5": ndcg(5),
        "NDCG@10": ndcg(10),
        "HR@5": min(5, m) / m,
        "HR@10": min(10, m) / m,
    }


def format_report(summary: dict[str, dict[str, float]], names: Sequence[str] = METRIC_NAMES) -> str:
    """Plain-text table in percent, one column per metric."""
    pct = summary["percent"]
    header = "  ".join(f"{n:>8}" for n in names)
    row = "  ".join(f"{pct[n]:>8.2f}" for n in names)
    return f"{header}\n{row}"
