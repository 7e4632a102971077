"""Fusing discriminative and perplexity scores into one candidate ranking.

Both score lists are softmax-normalised over the candidate set, their logs are
summed (a geometric average of the two distributions) and the candidates are
ranked by that fused score, highest first.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

DIRECTIONS = ("ascending", "descending")


@dataclass(frozen=True)
class RankingResult:
    s_d_norm: list[float]
    s_p_norm: list[float]
    fused: list[float]
    ranks: list[int]

    def __len__(self) -> int:
        return len(self.ranks)


def _as_scores(scores: Sequence[float], what: str) -> np.ndarray:
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{what}: need a non-empty list of scores")
    return arr


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max()
    return z - np.log(np.exp(z).sum())


def normalize_scores(scores: Sequence[float]) -> list[float]:
    """Softmax over the candidate scores."""
    x = _as_scores(scores, "normalize_scores")
    if not np.all(np.isfinite(x)):
        raise ValueError("normalize_scores: scores must be finite")
    e = np.exp(x - x.max())
    return (e / e.sum()).tolist()


def rank_order(scores: Sequence[float], direction: str = "ascending") -> list[int]:
    """1-based rank of each entry; ties go to the lower index (like rankdata's 'ordinal')."""
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    x = _as_scores(scores, "rank_order")
    key = x if direction == "ascending" else -x
    order = np.argsort(key, kind="stable")
    ranks = np.empty(x.size, dtype=np.int64)
    ranks[order] = np.arange(1, x.size + 1)
    return ranks.tolist()


def aggregate_rank(
    s_d: Sequence[float], s_p: Sequence[float], pre_normalized: bool = False
) -> RankingResult:
    """Rank candidates by log(softmax(s_d)) + log(softmax(s_p)).

    With ``pre_normalized`` the inputs are taken to be probability vectors
    already and only the log-sum and ranking are applied. A zero probability
    yields a fused score of -inf, which ranks last.
    """
    d = _as_scores(s_d, "aggregate_rank")
    p = _as_scores(s_p, "aggregate_rank")
    if d.size != p.size:
        raise ValueError(f"aggregate_rank: {d.size} discriminative vs {p.size} perplexity scores")
    if pre_normalized:
        if np.any(d < 0) or np.any(p < 0):
            raise ValueError("aggregate_rank: pre-normalized scores must be non-negative")
        d_norm, p_norm = d, p
        with np.errstate(divide="ignore"):
            fused = np.log(d) + np.log(p)
    else:
        if not (np.all(np.isfinite(d)) and np.all(np.isfinite(p))):
            raise ValueError("aggregate_rank: raw scores must be finite")
        log_d, log_p = _log_softmax(d), _log_softmax(p)
        d_norm, p_norm = np.exp(log_d), np.exp(log_p)
        fused = log_d + log_p
    return RankingResult(
        s_d_norm=d_norm.tolist(),
        s_p_norm=p_norm.tolist(),
        fused=fused.tolist(),
        ranks=rank_order(fused, "descending"),
    )


def rank_by(score: str, s_d: Sequence[float], s_p: Sequence[float]) -> list[int]:
    """Ranks driven by ``disc``, ``ppl`` or the ``fused`` combination."""
    if score == "fused":
        return aggregate_rank(s_d, s_p).ranks
    if score == "disc":
        return rank_order(s_d, "descending")
    if score == "ppl":
        return rank_order(s_p, "descending")
    raise ValueError(f"unknown score {score!r}; expected disc, ppl or fused")


def parse_score_table(text: str) -> tuple[list[str], list[float], list[float]]:
    """Parse ``<id> <s_d> <s_p>`` lines; blank lines and ``#`` comments are skipped."""
    ids, d, p = [], [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ScoreFileError(lineno, f"expected 3 fields (id s_d s_p), got {len(parts)}")
        try:
            sd, sp = float(parts[1]), float(parts[2])
        except ValueError:
            raise ScoreFileError(lineno, f"non-numeric score in {raw.strip()!r}") from None
        ids.append(parts[0])
        d.append(sd)
        p.append(sp)
    if not ids:
        raise ScoreFileError(0, "no candidates found")
    return ids, d, p


class ScoreFileError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def format_ranking_table(ids: Sequence[str], result: RankingResult) -> str:
    width = max(len("ID"), *(len(i) for i in ids))
    lines = [f"{'ID':<{width}}  {'S^d_norm':>10}  {'S^p_norm':>10}  {'fused':>12}  {'rank':>4}"]
    for i, name in enumerate(ids):
        lines.append(
            f"{name:<{width}}  {result.s_d_norm[i]:>10.6f}  {result.s_p_norm[i]:>10.6f}  "
            f"{result.fused[i]:>12.6f}  {result.ranks[i]:>4d}"
        )
    return "\n".join(lines)
