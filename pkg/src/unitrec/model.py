"""Encoder-decoder Transformer with turn-local / global history attention.

The encoder runs ``local_layers`` layers whose self-attention is restricted to
tokens of the same history turn, then ``global_layers`` unrestricted layers.
The decoder reads a BOS-prefixed candidate with causal self-attention plus
cross-attention to the encoded history. Two heads sit on top: a language
model head (tied to the token embedding) and an MLP score head applied to
the final decoder position.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass

import numpy as np

from unitrec import tensor as T
from unitrec.masks import (
    build_causal_mask,
    build_global_mask,
    build_local_mask,
    build_packed_causal_mask,
)
from unitrec.tensor import ShapeError, Tensor

MASK_MODES = ("standard", "no_local", "no_global")
LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    d_model: int = 64
    n_heads: int = 4
    local_layers: int = 2
    global_layers: int = 2
    decoder_layers: int = 2
    d_ff: int = 256
    max_len: int = 128

    def __post_init__(self):
        for field in ("vocab_size", "d_model", "n_heads", "decoder_layers", "d_ff", "max_len"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")
        if self.local_layers < 0 or self.global_layers < 0:
            raise ValueError("layer counts must be non-negative")
        if self.local_layers + self.global_layers < 1:
            raise ValueError("encoder needs at least one layer")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TurnedHistory:
    """Concatenated history tokens with the turn index of every token."""

    tokens: tuple[int, ...]
    turn_ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "turn_ids", tuple(int(t) for t in self.turn_ids))
        if not self.tokens:
            raise ValueError("history has no tokens")
        if len(self.tokens) != len(self.turn_ids):
            raise ValueError("tokens and turn_ids differ in length")
        if self.turn_ids[0] != 0 or any(
            b - a not in (0, 1) for a, b in zip(self.turn_ids, self.turn_ids[1:])
        ):
            raise ValueError("turn_ids must run 0..N-1 without gaps")

    @property
    def n_turns(self) -> int:
        return self.turn_ids[-1] + 1

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class EncodedHistory:
    states: Tensor
    attention: list[Tensor] | None = None


# ---------------------------------------------------------------- parameters


def _attn_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for p in ("q", "k", "v", "o"):
        shapes[f"{prefix}.w{p}"] = (d, d)
        shapes[f"{prefix}.b{p}"] = (d,)
    return shapes


def _ln_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.gain": (d,), f"{prefix}.bias": (d,)}


def _ffn_shapes(prefix: str, d: int, d_ff: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.w1": (d, d_ff),
        f"{prefix}.b1": (d_ff,),
        f"{prefix}.w2": (d_ff, d),
        f"{prefix}.b2": (d,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable parameter, in a fixed order."""
    d = cfg.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "enc_pos": (cfg.max_len, d),
        "dec_pos": (cfg.max_len, d),
    }
    for i in range(cfg.local_layers + cfg.global_layers):
        p = f"enc.{i}"
        shapes.update(_ln_shapes(f"{p}.ln1", d))
        shapes.update(_attn_shapes(f"{p}.attn", d))
        shapes.update(_ln_shapes(f"{p}.ln2", d))
        shapes.update(_ffn_shapes(f"{p}.ffn", d, cfg.d_ff))
    shapes.update(_ln_shapes("enc.ln_f", d))
    for i in range(cfg.decoder_layers):
        p = f"dec.{i}"
        shapes.update(_ln_shapes(f"{p}.ln1", d))
        shapes.update(_attn_shapes(f"{p}.self_attn", d))
        shapes.update(_ln_shapes(f"{p}.ln2", d))
        shapes.update(_attn_shapes(f"{p}.cross_attn", d))
        shapes.update(_ln_shapes(f"{p}.ln3", d))
        shapes.update(_ffn_shapes(f"{p}.ffn", d, cfg.d_ff))
    shapes.update(_ln_shapes("dec.ln_f", d))
    shapes["lm_head.bias"] = (cfg.vocab_size,)
    shapes["score.w1"] = (d, d)
    shapes["score.b1"] = (d,)
    shapes["score.w2"] = (d,)
    shapes["score.b2"] = ()
    shapes["tau"] = ()
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "tau" or leaf == "gain":
            data = np.ones(shape)
        elif len(shape) <= 1 and name != "score.w2":
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def decays(name: str, shape: tuple[int, ...]) -> bool:
    """Whether weight decay applies; biases, layer-norm affine and tau are exempt."""
    return name != "tau" and (len(shape) >= 2 or name == "score.w2")


# ---------------------------------------------------------------- attention


def masked_attention(
    q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None
) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_k) + mask) v for every head.

    ``q`` is heads x T x d_k, ``k`` and ``v`` are heads x S x d_k and ``mask``
    is T x S (or None for unrestricted attention). Returns the per-head
    context and the attention weights.
    """
    heads, t_len, d_k = q.shape
    s_len = k.shape[1]
    if mask is not None and mask.shape != (t_len, s_len):
        raise ShapeError(f"mask shape {mask.shape} does not match attention {t_len}x{s_len}")
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d_k))
    if mask is not None:
        scores = T.add_constant(scores, mask)
    weights = T.softmax_lastdim(scores)
    return T.matmul(weights, v), weights


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    length, d = x.shape
    return T.transpose(T.reshape(x, (length, n_heads, d // n_heads)), (1, 0, 2))


def multi_head_attention(
    x_q: Tensor,
    x_kv: Tensor,
    mask: np.ndarray | None,
    params: dict[str, Tensor],
    prefix: str,
    n_heads: int,
) -> tuple[Tensor, Tensor]:
    p = params
    q = _split_heads(T.linear(x_q, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), n_heads)
    k = _split_heads(T.linear(x_kv, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), n_heads)
    v = _split_heads(T.linear(x_kv, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), n_heads)
    ctx, weights = masked_attention(q, k, v, mask)
    length = x_q.shape[0]
    merged = T.reshape(T.transpose(ctx, (1, 0, 2)), (length, x_q.shape[1]))
    return T.linear(merged, p[f"{prefix}.wo"], p[f"{prefix}.bo"]), weights


def _ln(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"], LN_EPS)


def _ffn(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = T.gelu(T.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return T.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


# ---------------------------------------------------------------- encoder


def layer_masks(history: TurnedHistory, cfg: ModelConfig, mask_mode: str = "standard") -> list[np.ndarray]:
    """Self-attention mask for each encoder layer under the given ablation mode."""
    if mask_mode not in MASK_MODES:
        raise ValueError(f"unknown mask mode {mask_mode!r}; expected one of {MASK_MODES}")
    local = build_local_mask(history.turn_ids)
    full = build_global_mask(len(history))
    local_mask = full if mask_mode == "no_local" else local
    global_mask = local if mask_mode == "no_global" else full
    return [local_mask] * cfg.local_layers + [global_mask] * cfg.global_layers


def encode_history(
    history: TurnedHistory,
    cfg: ModelConfig,
    params: dict[str, Tensor],
    mask_mode: str = "standard",
    positions: Sequence[int] | None = None,
    n_layers: int | None = None,
    keep_attention: bool = False,
) -> EncodedHistory:
    """Run the history encoder.

    ``n_layers`` stops after that many layers (skipping the final layer norm),
    which lets tests inspect the purely local stage. ``positions`` overrides the
    default 0..len-1 position indices.
    """
    length = len(history)
    if length > cfg.max_len:
        raise ValueError(f"history of {length} tokens exceeds max_len={cfg.max_len}")
    if positions is None:
        positions = range(length)
    x = T.add(
        T.take_rows(params["tok_emb"], history.tokens),
        T.take_rows(params["enc_pos"], list(positions)),
    )
    masks = layer_masks(history, cfg, mask_mode)
    stop = len(masks) if n_layers is None else n_layers
    attention = [] if keep_attention else None
    for i, mask in enumerate(masks[:stop]):
        p = f"enc.{i}"
        h = _ln(x, params, f"{p}.ln1")
        a, w = multi_head_attention(h, h, mask, params, f"{p}.attn", cfg.n_heads)
        if attention is not None:
            attention.append(w)
        x = T.add(x, a)
        x = T.add(x, _ffn(_ln(x, params, f"{p}.ln2"), params, f"{p}.ffn"))
    if n_layers is None:
        x = _ln(x, params, "enc.ln_f")
    return EncodedHistory(states=x, attention=attention)


# ---------------------------------------------------------------- decoder


def _decode(
    enc: EncodedHistory,
    tokens: Sequence[int],
    positions: Sequence[int],
    self_mask: np.ndarray,
    cfg: ModelConfig,
    params: dict[str, Tensor],
) -> tuple[Tensor, Tensor]:
    x = T.add(T.take_rows(params["tok_emb"], tokens), T.take_rows(params["dec_pos"], positions))
    for i in range(cfg.decoder_layers):
        p = f"dec.{i}"
        h = _ln(x, params, f"{p}.ln1")
        a, _ = multi_head_attention(h, h, self_mask, params, f"{p}.self_attn", cfg.n_heads)
        x = T.add(x, a)
        h = _ln(x, params, f"{p}.ln2")
        a, _ = multi_head_attention(h, enc.states, None, params, f"{p}.cross_attn", cfg.n_heads)
        x = T.add(x, a)
        x = T.add(x, _ffn(_ln(x, params, f"{p}.ln3"), params, f"{p}.ffn"))
    hidden = _ln(x, params, "dec.ln_f")
    logits = T.add(
        T.matmul(hidden, T.transpose(params["tok_emb"], (1, 0))), params["lm_head.bias"]
    )
    return hidden, logits


def _check_candidate(y: Sequence[int], cfg: ModelConfig) -> None:
    if len(y) == 0:
        raise ValueError("candidate sequence is empty")
    if len(y) > cfg.max_len:
        raise ValueError(f"candidate of {len(y)} tokens exceeds max_len={cfg.max_len}")


def decode_candidate(
    enc: EncodedHistory, y: Sequence[int], cfg: ModelConfig, params: dict[str, Tensor]
) -> tuple[Tensor, Tensor]:
    """Teacher-forced decoder pass; ``logits[t]`` predicts ``y[t + 1]``."""
    _check_candidate(y, cfg)
    n = len(y)
    return _decode(enc, y, range(n), build_causal_mask(n), cfg, params)


def decode_candidates(
    enc: EncodedHistory,
    candidates: Sequence[Sequence[int]],
    cfg: ModelConfig,
    params: dict[str, Tensor],
) -> tuple[Tensor, Tensor, list[int]]:
    """Decode several candidates in one pass, laid end to end.

    A block-diagonal causal mask keeps the candidates independent, and every
    decoder op other than self-attention acts row-wise, so this is the same
    computation as calling :func:`decode_candidate` on each one. Returns the
    stacked hidden states and logits plus each candidate's start offset.
    """
    for y in candidates:
        _check_candidate(y, cfg)
    lengths = [len(y) for y in candidates]
    offsets = [int(o) for o in np.cumsum([0] + lengths[:-1])]
    tokens = [t for y in candidates for t in y]
    positions = [i for n in lengths for i in range(n)]
    hidden, logits = _decode(enc, tokens, positions, build_packed_causal_mask(lengths), cfg, params)
    return hidden, logits, offsets


def score_head(h_last: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Discriminative matching score from the final decoder state."""
    d = h_last.shape[-1]
    h = T.tanh(T.linear(T.reshape(h_last, (1, d)), params["score.w1"], params["score.b1"]))
    s = T.matmul(h, T.reshape(params["score.w2"], (d, 1)))
    return T.add(T.reshape(s, ()), params["score.b2"])


class UniTRec:
    """Config plus parameter collection, with convenience forward methods."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.params = init_params(cfg, seed) if params is None else params
        expected = param_shapes(cfg)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ValueError(f"parameter mismatch: missing {missing}, unexpected {extra}")

    @property
    def tau(self) -> Tensor:
        return self.params["tau"]

    def encode(self, history: TurnedHistory, mask_mode: str = "standard", **kw) -> EncodedHistory:
        return encode_history(history, self.cfg, self.params, mask_mode=mask_mode, **kw)

    def decode(self, enc: EncodedHistory, y: Sequence[int]) -> tuple[Tensor, Tensor]:
        return decode_candidate(enc, y, self.cfg, self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data = np.array(arrays[name], dtype=np.float64)

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())
