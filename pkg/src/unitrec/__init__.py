"""UniTRec: text recommendation with turn-local/global history attention and
joint discriminative + perplexity ranking, on a small numpy autodiff engine."""

from unitrec.model import ModelConfig, TurnedHistory, UniTRec
from unitrec.ranking import aggregate_rank, normalize_scores, rank_order

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "TurnedHistory",
    "UniTRec",
    "aggregate_rank",
    "normalize_scores",
    "rank_order",
]
