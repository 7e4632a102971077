"""AdamW + cosine schedule training loop and ranking evaluation."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from unitrec import tensor as T
from unitrec.checkpoint import Checkpoint, save_checkpoint
from unitrec.data import EncodedExample, sample_negatives
from unitrec.metrics import LabeledRanking, aggregate_metrics, instance_metrics
from unitrec.model import MASK_MODES, UniTRec, decays
from unitrec.objectives import OBJECTIVE_MODES, candidate_scores, joint_loss
from unitrec.ranking import rank_by

log = logging.getLogger(__name__)

SCORE_MODES = ("disc", "ppl", "fused")


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: Path | None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainConfig:
    epochs: int = 3
    K: int = 4
    batch_size: int = 8
    lr_peak: float = 3e-4
    warmup_frac: float = 0.05
    warmup_steps: int | None = None
    total_steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float | None = 1.0
    seed: int = 0
    objective: str = "joint"
    mask_mode: str = "standard"
    val_size: int = 200
    log_every: int = 25

    def __post_init__(self):
        if self.objective not in OBJECTIVE_MODES:
            raise ValueError(f"objective must be one of {OBJECTIVE_MODES}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")
        if self.epochs < 0 or self.K < 1 or self.batch_size < 1:
            raise ValueError("epochs >= 0, K >= 1 and batch_size >= 1 are required")
        if (
            self.warmup_steps is not None
            and self.total_steps is not None
            and self.warmup_steps > self.total_steps
        ):
            raise ValueError("warmup_steps exceeds total_steps")


# ---------------------------------------------------------------- optimiser


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    lr_peak: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def for_params(cls, params: dict[str, T.Tensor], **hyper) -> "OptimizerState":
        state = cls(**hyper)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adamw_step(params: dict[str, T.Tensor], state: OptimizerState, lr: float) -> None:
    """One AdamW update from ``p.grad`` with bias correction and decoupled decay.

    Parameters without a gradient are left untouched (their moments are not
    advanced either).
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay and decays(name, p.shape):
            p.data = p.data * (1.0 - lr * state.weight_decay)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(params: dict[str, T.Tensor], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None))
    if total > max_norm:
        factor = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return total


def cosine_lr(step: int, warmup_steps: int, total_steps: int, lr_peak: float) -> float:
    """Linear warmup to ``lr_peak`` then half-cosine decay to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < warmup_steps:
        return lr_peak * step / warmup_steps
    if step >= total_steps:
        return 0.0
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- evaluation


def score_example(model: UniTRec, ex: EncodedExample, mask_mode: str = "standard") -> tuple[list[float], list[float]]:
    enc = model.encode(ex.history, mask_mode=mask_mode)
    scores = candidate_scores(model, enc, ex.candidates)
    return [d.item() for d, _ in scores], [p.item() for _, p in scores]


def evaluate(
    model: UniTRec,
    examples: Sequence[EncodedExample],
    score: str = "fused",
    mask_mode: str = "standard",
) -> tuple[dict, list[dict[str, float]]]:
    """Rank every example's candidates and aggregate MRR / NDCG / HR."""
    if score not in SCORE_MODES:
        raise ValueError(f"score must be one of {SCORE_MODES}")
    records = []
    for ex in examples:
        s_d, s_p = score_example(model, ex, mask_mode)
        ranks = rank_by(score, s_d, s_p)
        records.append(instance_metrics(LabeledRanking(ranks, ex.positive_indices)))
    return aggregate_metrics(records), records


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log_lines: list[str]
    best_val_mrr: float
    final_step: int


def _fmt(x: float) -> str:
    return repr(float(x))


def train(
    train_examples: Sequence[EncodedExample],
    val_examples: Sequence[EncodedExample],
    model: UniTRec,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """Optimise the joint objective; keep the parameters with the best validation MRR.

    The model is left holding the best parameters. With ``checkpoint_path`` the
    best checkpoint so far is written after every epoch, so a divergence never
    destroys the last good state.
    """
    if not train_examples:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(train_examples) / cfg.batch_size)
    start_step = resume.step if resume is not None else 0
    total = cfg.total_steps if cfg.total_steps is not None else start_step + cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_steps if cfg.warmup_steps is not None else int(cfg.warmup_frac * (total - start_step))
    state = OptimizerState.for_params(
        model.params,
        lr_peak=cfg.lr_peak,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )
    if resume is not None:
        state.step = resume.step
        if resume.adam_m is not None:
            state.m = {k: v.copy() for k, v in resume.adam_m.items()}
            state.v = {k: v.copy() for k, v in resume.adam_v.items()}

    lines: list[str] = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None

    def emit(line: str) -> None:
        lines.append(line)
        log.info(line)
        if log_fh:
            log_fh.write(line + "\n")
            log_fh.flush()

    meta = {"train_config": asdict(cfg)}
    best_mrr = -1.0
    best = Checkpoint.from_model(model, step=state.step, meta=meta)
    last_good: Path | None = None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(train_examples))
            acc_d = acc_p = 0.0
            n_acc = 0
            for b in range(steps_per_epoch):
                batch = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                model.zero_grad()
                for idx in batch:
                    for inst in sample_negatives(train_examples[idx], cfg.K, rng):
                        with T.Tape() as tape:
                            loss, diag = joint_loss(inst, model, cfg.objective, cfg.mask_mode)
                            loss = T.scale(loss, 1.0 / len(batch))
                        if not math.isfinite(loss.item()):
                            raise TrainingDiverged(
                                f"loss became non-finite at step {state.step + 1}", last_good
                            )
                        T.backward(loss, tape)
                        acc_d += diag.loss_d
                        acc_p += diag.loss_p
                        n_acc += 1
                lr = cosine_lr(state.step + 1, warmup, total, cfg.lr_peak)
                if cfg.clip_norm is not None:
                    clip_grad_norm(model.params, cfg.clip_norm)
                try:
                    adamw_step(model.params, state, lr)
                except NonFiniteGradient as exc:
                    raise TrainingDiverged(str(exc), last_good) from exc
                if state.step % cfg.log_every == 0 or b == steps_per_epoch - 1:
                    emit(
                        f"step={state.step} lr={_fmt(lr)} loss_d={_fmt(acc_d / n_acc)} "
                        f"loss_p={_fmt(acc_p / n_acc)} tau={_fmt(model.tau.item())}"
                    )
                    acc_d = acc_p = 0.0
                    n_acc = 0
            summary, _ = evaluate(model, val_examples, "fused", cfg.mask_mode) if val_examples else (None, None)
            val = summary["fraction"] if summary else {}
            emit(
                f"epoch={epoch} step={state.step} "
                + " ".join(f"val_{k.lower()}={_fmt(v)}" for k, v in val.items())
            )
            mrr = val.get("MRR", float(epoch))
            if mrr > best_mrr:
                best_mrr = mrr
                best = Checkpoint.from_model(
                    model,
                    step=state.step,
                    adam_m={k: v.copy() for k, v in state.m.items()},
                    adam_v={k: v.copy() for k, v in state.v.items()},
                    meta={**meta, "epoch": epoch, "val": val},
                )
                if checkpoint_path is not None:
                    last_good = save_checkpoint(best, checkpoint_path)
    finally:
        if log_fh:
            log_fh.close()
    model.load_arrays(best.params)
    return TrainResult(checkpoint=best, log_lines=lines, best_val_mrr=best_mrr, final_step=state.step)


def split_validation(
    examples: Sequence[EncodedExample], val_size: int, seed: int
) -> tuple[list[EncodedExample], list[EncodedExample]]:
    """Hold out ``val_size`` training examples (seeded) for model selection."""
    if val_size >= len(examples):
        raise ValueError(f"val_size={val_size} leaves no training examples out of {len(examples)}")
    perm = np.random.default_rng(seed).permutation(len(examples))
    held = set(perm[:val_size].tolist())
    train_part = [ex for i, ex in enumerate(examples) if i not in held]
    val_part = [ex for i, ex in enumerate(examples) if i in held]
    return train_part, val_part
