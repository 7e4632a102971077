import numpy as np
import pytest

from conftest import TINY, perturb_params, random_candidate, random_history
from oracles import rel_err
from unitrec.model import (
    ModelConfig,
    TurnedHistory,
    UniTRec,
    decode_candidate,
    decode_candidates,
    masked_attention,
    param_shapes,
    score_head,
)
from unitrec.objectives import CandidateInstance, joint_loss
from unitrec.tensor import ShapeError, Tape, Tensor, backward, finite_diff_grad


@pytest.fixture
def model(rng):
    m = UniTRec(TINY, seed=7)
    perturb_params(m, rng)
    return m


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.d_model, cfg.n_heads, cfg.d_k) == (64, 4, 16)
        assert (cfg.local_layers, cfg.global_layers, cfg.decoder_layers) == (2, 2, 2)

    @pytest.mark.parametrize(
        "kw", [{"d_model": 10, "n_heads": 4}, {"local_layers": 0, "global_layers": 0}, {"vocab_size": 0}]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)

    def test_tau_present_once_and_shapes_from_config(self):
        shapes = param_shapes(TINY)
        assert sum(1 for n in shapes if n == "tau") == 1
        m = UniTRec(TINY, seed=0)
        assert {n: p.shape for n, p in m.params.items()} == shapes
        assert m.tau.item() == 1.0


class TestTurnedHistory:
    def test_valid(self):
        h = TurnedHistory([5, 6, 7], [0, 0, 1])
        assert h.n_turns == 2 and len(h) == 3

    @pytest.mark.parametrize(
        "tokens,ids", [([], []), ([5, 6], [0]), ([5, 6], [0, 2]), ([5, 6], [1, 1]), ([5, 6], [1, 0])]
    )
    def test_invalid(self, tokens, ids):
        with pytest.raises(ValueError):
            TurnedHistory(tokens, ids)


class TestMaskedAttention:
    def test_one_hot_returns_value_row(self, rng):
        q, k, v = (Tensor(rng.normal(size=(1, s, 4))) for s in (1, 5, 5))
        mask = np.full((1, 5), -1e9)
        mask[0, 3] = 0.0
        ctx, _ = masked_attention(q, k, v, mask)
        np.testing.assert_array_equal(ctx.data[0, 0], v.data[0, 3])

    def test_identical_keys_give_mean(self, rng):
        q = Tensor(rng.normal(size=(2, 3, 4)))
        k = Tensor(np.tile(rng.normal(size=(2, 1, 4)), (1, 6, 1)))
        v = Tensor(rng.normal(size=(2, 6, 4)))
        ctx, w = masked_attention(q, k, v, np.zeros((3, 6)))
        np.testing.assert_allclose(w.data, 1 / 6, atol=1e-15)
        np.testing.assert_allclose(ctx.data, np.broadcast_to(v.data.mean(axis=1, keepdims=True), ctx.shape), atol=1e-14)

    def test_mask_size_mismatch(self, rng):
        q = Tensor(rng.normal(size=(1, 3, 4)))
        with pytest.raises(ShapeError):
            masked_attention(q, q, q, np.zeros((3, 4)))

    @pytest.mark.parametrize("seed", range(5))
    def test_cross_turn_weights_vanish(self, seed):
        rng = np.random.default_rng(seed)
        h = random_history(rng, 4, TINY.vocab_size)
        m = UniTRec(TINY, seed=seed)
        perturb_params(m, rng, scale=1.0)
        enc = m.encode(h, keep_attention=True)
        same = np.equal.outer(h.turn_ids, h.turn_ids)
        local = enc.attention[: TINY.local_layers]
        for w in local:
            assert w.data[:, ~same].max(initial=0.0) < 1e-40


class TestEncoder:
    def test_output_shape(self, model, rng):
        h = random_history(rng, 3, TINY.vocab_size)
        assert model.encode(h).states.shape == (len(h), TINY.d_model)

    def test_token_out_of_range(self, model):
        with pytest.raises(IndexError):
            model.encode(TurnedHistory([5, TINY.vocab_size], [0, 0]))

    def test_local_isolation(self, model):
        a = TurnedHistory([5, 6, 7, 8, 9], [0, 0, 0, 1, 1])
        b = TurnedHistory([5, 6, 7, 12, 13], [0, 0, 0, 1, 1])
        sa = model.encode(a, n_layers=TINY.local_layers).states.data
        sb = model.encode(b, n_layers=TINY.local_layers).states.data
        np.testing.assert_array_equal(sa[:3], sb[:3])
        assert not np.allclose(sa[3:], sb[3:])
        full_a, full_b = model.encode(a).states.data, model.encode(b).states.data
        assert not np.allclose(full_a[:3], full_b[:3])

    @pytest.mark.parametrize("seed", range(3))
    def test_turn_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        m = UniTRec(TINY, seed=seed)
        perturb_params(m, rng)
        h = random_history(rng, 3, TINY.vocab_size, min_len=2)
        spans = [[i for i, t in enumerate(h.turn_ids) if t == k] for k in range(3)]
        order = [2, 0, 1]
        perm = [i for k in order for i in spans[k]]
        tokens = [h.tokens[i] for i in perm]
        turn_ids = [j for j, k in enumerate(order) for _ in spans[k]]
        permuted = TurnedHistory(tokens, turn_ids)
        base = m.encode(h, n_layers=TINY.local_layers).states.data
        out = m.encode(permuted, positions=perm, n_layers=TINY.local_layers).states.data
        np.testing.assert_allclose(out, base[perm], rtol=0, atol=1e-12)

    def test_single_turn_local_equals_global(self, model):
        h = TurnedHistory([5, 9, 11, 6], [0, 0, 0, 0])
        a = model.encode(h, mask_mode="standard").states.data
        b = model.encode(h, mask_mode="no_local").states.data
        assert np.array_equal(a, b)

    def test_no_local_ablation_uses_global_masks(self, model, rng):
        h = random_history(rng, 3, TINY.vocab_size, min_len=2)
        enc = model.encode(h, mask_mode="no_local", keep_attention=True)
        same = np.equal.outer(h.turn_ids, h.turn_ids)
        assert enc.attention[0].data[:, ~same].max() > 1e-6

    def test_no_global_ablation_keeps_turns_isolated(self, model, rng):
        h = random_history(rng, 3, TINY.vocab_size, min_len=2)
        enc = model.encode(h, mask_mode="no_global", keep_attention=True)
        same = np.equal.outer(h.turn_ids, h.turn_ids)
        assert all(w.data[:, ~same].max() < 1e-40 for w in enc.attention)

    def test_unknown_mask_mode(self, model):
        with pytest.raises(ValueError):
            model.encode(TurnedHistory([5], [0]), mask_mode="sideways")


class TestDecoder:
    def test_shapes(self, model, rng):
        enc = model.encode(random_history(rng, 2, TINY.vocab_size))
        y = random_candidate(rng, TINY.vocab_size)
        hidden, logits = model.decode(enc, y)
        assert hidden.shape == (len(y), TINY.d_model)
        assert logits.shape == (len(y), TINY.vocab_size)

    def test_empty_rejected(self, model):
        enc = model.encode(TurnedHistory([5], [0]))
        with pytest.raises(ValueError):
            model.decode(enc, [])

    @pytest.mark.parametrize("seed", range(5))
    def test_causality_bit_exact(self, seed):
        rng = np.random.default_rng(seed)
        m = UniTRec(TINY, seed=seed)
        perturb_params(m, rng)
        enc = m.encode(random_history(rng, 2, TINY.vocab_size))
        y = list(random_candidate(rng, TINY.vocab_size, n=6))
        t = int(rng.integers(1, len(y) - 1))
        z = y[: t + 1] + rng.integers(5, TINY.vocab_size, size=len(y) - t - 1).tolist()
        hy, ly = m.decode(enc, y)
        hz, lz = m.decode(enc, z)
        assert np.array_equal(hy.data[: t + 1], hz.data[: t + 1])
        assert np.array_equal(ly.data[: t + 1], lz.data[: t + 1])

    def test_cross_attention_is_live(self, model, rng):
        enc = model.encode(random_history(rng, 2, TINY.vocab_size))
        y = random_candidate(rng, TINY.vocab_size)
        _, base = model.decode(enc, y)
        for i in range(enc.states.shape[0]):
            bumped = enc.states.data.copy()
            bumped[i] += rng.normal(0, 0.5, size=TINY.d_model)
            _, out = model.decode(type(enc)(Tensor(bumped)), y)
            assert np.abs(out.data - base.data).max() > 1e-9

    def test_zeroed_cross_attention_is_plain_lm(self, model, rng):
        for name, p in model.params.items():
            if ".cross_attn." in name:
                p.data = np.zeros_like(p.data)
        y = random_candidate(rng, TINY.vocab_size)
        zero_enc = type(model.encode(TurnedHistory([5], [0])))(Tensor(np.zeros((4, TINY.d_model))))
        other = model.encode(random_history(rng, 3, TINY.vocab_size))
        _, a = model.decode(zero_enc, y)
        _, b = model.decode(other, y)
        assert np.array_equal(a.data, b.data)

    def test_packed_matches_single(self, model, rng):
        enc = model.encode(random_history(rng, 3, TINY.vocab_size))
        cands = [random_candidate(rng, TINY.vocab_size) for _ in range(4)]
        hidden, logits, offsets = decode_candidates(enc, cands, TINY, model.params)
        for y, start in zip(cands, offsets):
            h1, l1 = decode_candidate(enc, y, TINY, model.params)
            np.testing.assert_allclose(hidden.data[start : start + len(y)], h1.data, rtol=0, atol=1e-12)
            np.testing.assert_allclose(logits.data[start : start + len(y)], l1.data, rtol=0, atol=1e-12)

    def test_too_long_rejected(self, model):
        enc = model.encode(TurnedHistory([5], [0]))
        with pytest.raises(ValueError, match="max_len"):
            model.decode(enc, [1] + [5] * TINY.max_len)


class TestScoreHead:
    def _params(self, d, w1, b1, w2, b2):
        return {
            "score.w1": Tensor(w1), "score.b1": Tensor(b1),
            "score.w2": Tensor(w2), "score.b2": Tensor(np.array(b2)),
        }

    def test_all_zero(self, rng):
        d = 4
        p = self._params(d, np.zeros((d, d)), np.zeros(d), np.zeros(d), 0.0)
        assert score_head(Tensor(rng.normal(size=d)), p).item() == 0.0

    def test_identity_at_origin(self):
        d = 4
        p = self._params(d, np.eye(d), np.zeros(d), np.eye(d)[1], 0.0)
        assert score_head(Tensor(np.zeros(d)), p).item() == 0.0

    def test_gradient_wrt_hidden(self, model, rng):
        h = Tensor(rng.normal(size=TINY.d_model), requires_grad=True)
        with Tape() as tape:
            s = score_head(h, model.params)
        backward(s, tape)
        num = finite_diff_grad(lambda x: score_head(x, model.params), h)
        assert rel_err(h.grad, num).max() < 1e-5


def test_every_parameter_gets_gradient():
    rng = np.random.default_rng(0)
    m = UniTRec(TINY, seed=0)
    perturb_params(m, rng)
    inst = CandidateInstance(
        random_history(rng, 3, TINY.vocab_size),
        random_candidate(rng, TINY.vocab_size),
        tuple(random_candidate(rng, TINY.vocab_size) for _ in range(3)),
    )
    with Tape() as tape:
        loss, _ = joint_loss(inst, m)
    backward(loss, tape)
    tokens_used = set(inst.history.tokens) | {t for c in inst.candidates for t in c}
    for name, p in m.params.items():
        assert p.grad is not None, name
        if name in ("enc_pos", "dec_pos", "tok_emb"):
            assert np.abs(p.grad).sum() > 0, name
        else:
            assert np.abs(p.grad).max() > 0, name
    assert np.abs(m.params["tok_emb"].grad[sorted(tokens_used)]).sum(axis=1).min() > 0
