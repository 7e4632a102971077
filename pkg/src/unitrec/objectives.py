"""Contrastive training objectives over discriminative and perplexity scores."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

from unitrec import tensor as T
from unitrec.model import EncodedHistory, TurnedHistory, UniTRec, decode_candidates, score_head
from unitrec.tensor import Tensor

OBJECTIVE_MODES = ("joint", "disc_only", "ppl_only")


@dataclass(frozen=True)
class CandidateInstance:
    """A history with one positive candidate and K sampled negatives.

    Candidate sequences are in decoder form: BOS, tokens..., EOS.
    """

    history: TurnedHistory
    positive: tuple[int, ...]
    negatives: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if not self.negatives:
            raise ValueError("a training instance needs at least one negative")
        for seq in (self.positive, *self.negatives):
            if len(seq) < 2:
                raise ValueError("candidate must hold at least BOS and EOS")

    @property
    def K(self) -> int:
        return len(self.negatives)

    @property
    def candidates(self) -> list[tuple[int, ...]]:
        return [self.positive, *self.negatives]


@dataclass(frozen=True)
class ScorePair:
    s_d: float
    s_p: float


@dataclass
class LossDiagnostics:
    loss_d: float
    loss_p: float
    tau: float
    scores: list[ScorePair] = field(default_factory=list)


def perplexity_score(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Length-normalised log-likelihood of ``targets`` (negative log-perplexity)."""
    if len(targets) == 0:
        raise ValueError("perplexity_score needs at least one target")
    return T.mean_all(T.log_softmax_gather(logits, targets))


def nce_loss(positive: Tensor, negatives: Sequence[Tensor]) -> Tensor:
    """-log softmax of the positive score among positive + negatives."""
    if len(negatives) == 0:
        raise ValueError("nce_loss needs at least one negative score")
    logp = T.log_softmax_lastdim(T.stack([positive, *negatives]))
    return T.scale(T.select(logp, 0), -1.0)


def perplexity_nce_loss(tau: Tensor, positive: Tensor, negatives: Sequence[Tensor]) -> Tensor:
    if len(negatives) == 0:
        raise ValueError("perplexity_nce_loss needs at least one negative score")
    return nce_loss(T.mul(tau, positive), [T.mul(tau, s) for s in negatives])


def candidate_scores(
    model: UniTRec, enc: EncodedHistory, candidates: Sequence[Sequence[int]]
) -> list[tuple[Tensor, Tensor]]:
    """(S^d, S^p) tensors for each decoder-form candidate against one encoded history."""
    hidden, logits, offsets = decode_candidates(enc, candidates, model.cfg, model.params)
    out = []
    for y, start in zip(candidates, offsets):
        n = len(y)
        s_d = score_head(T.select(hidden, start + n - 1), model.params)
        rows = T.take_rows(logits, range(start, start + n - 1))
        s_p = perplexity_score(rows, y[1:])
        out.append((s_d, s_p))
    return out


def joint_loss(
    inst: CandidateInstance,
    model: UniTRec,
    objective: str = "joint",
    mask_mode: str = "standard",
) -> tuple[Tensor, LossDiagnostics]:
    """Sum of the discriminative and temperature-scaled perplexity NCE losses.

    ``disc_only`` and ``ppl_only`` keep just one of the two terms. The history
    is encoded once and shared by all K + 1 candidates.
    """
    if objective not in OBJECTIVE_MODES:
        raise ValueError(f"unknown objective {objective!r}; expected one of {OBJECTIVE_MODES}")
    enc = model.encode(inst.history, mask_mode=mask_mode)
    scores = candidate_scores(model, enc, inst.candidates)
    s_d = [s for s, _ in scores]
    s_p = [s for _, s in scores]
    loss_d = nce_loss(s_d[0], s_d[1:])
    loss_p = perplexity_nce_loss(model.tau, s_p[0], s_p[1:])
    if objective == "joint":
        loss = T.add(loss_d, loss_p)
    elif objective == "disc_only":
        loss = loss_d
    else:
        loss = loss_p
    diag = LossDiagnostics(
        loss_d=loss_d.item(),
        loss_p=loss_p.item(),
        tau=model.tau.item(),
        scores=[ScorePair(a.item(), b.item()) for a, b in scores],
    )
    return loss, diag
