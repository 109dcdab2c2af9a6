import math

import numpy as np
import pytest

from miniflow import tensor as T
from miniflow.model import (
    FeatureTap,
    ModelConfig,
    ModelParams,
    adaln_modulate,
    joint_attention,
    mmdit_forward,
    patchify,
    timestep_embedding,
    unpatchify,
)
from miniflow.tensor import ShapeError, Tape, Tensor


TINY = ModelConfig(depth=2, hidden_dim=16, heads=2, latent_shape=(2, 4, 4),
                   patch_size=2, text_tokens=3, text_embed_dim=8)


def randomize(params: ModelParams, rng: np.random.Generator, std: float = 0.3) -> ModelParams:
    """Overwrite every array (including zero-init heads) so all paths are live."""
    return ModelParams(params.cfg, {k: rng.normal(0.0, std, size=v.shape)
                                    for k, v in params.arrays.items()})


def random_inputs(cfg: ModelConfig, rng: np.random.Generator):
    z = rng.normal(size=cfg.latent_shape)
    t = float(rng.uniform(0.05, 0.95))
    text = rng.normal(size=(cfg.text_tokens, cfg.text_embed_dim))
    return z, t, text


# ---------------------------------------------------------------------------
# timestep embedding


def test_timestep_embedding_at_zero():
    emb = timestep_embedding(0.0, 8).data
    np.testing.assert_array_equal(emb[:4], np.zeros(4))
    np.testing.assert_array_equal(emb[4:], np.ones(4))


def test_timestep_embedding_pure_function():
    np.testing.assert_array_equal(timestep_embedding(0.3, 16).data,
                                  timestep_embedding(0.3, 16).data)


def test_timestep_embedding_first_frequency_is_one():
    emb = timestep_embedding(0.5, 8).data
    assert emb[0] == pytest.approx(math.sin(0.5), abs=1e-15)
    assert emb[0] == pytest.approx(0.4794, abs=1e-4)


def test_timestep_embedding_frequency_range():
    emb = timestep_embedding(1.0, 10).data
    assert emb[4] == pytest.approx(math.sin(1e4), abs=1e-9)


def test_timestep_embedding_odd_dim_rejected():
    with pytest.raises(ShapeError):
        timestep_embedding(0.5, 7)


# ---------------------------------------------------------------------------
# patchify


def test_patchify_single_patch():
    out = patchify(Tensor(np.arange(4.0).reshape(1, 2, 2)), 2)
    assert out.shape == (1, 4)
    np.testing.assert_array_equal(out.data, [[0.0, 1.0, 2.0, 3.0]])


def test_patchify_token_zero_is_top_left_block():
    x = np.arange(16.0).reshape(1, 4, 4)
    out = patchify(Tensor(x), 2)
    assert out.shape == (4, 4)
    np.testing.assert_array_equal(out.data[0], [0.0, 1.0, 4.0, 5.0])
    np.testing.assert_array_equal(out.data[1], [2.0, 3.0, 6.0, 7.0])


def test_patchify_round_trip_bitwise():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 8, 8))
    back = unpatchify(patchify(Tensor(x), 2), (4, 8, 8), 2)
    assert np.array_equal(back.data, x)


def test_patchify_round_trip_batched():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(3, 4, 8, 8))
    back = unpatchify(patchify(Tensor(x), 2), (4, 8, 8), 2)
    assert np.array_equal(back.data, x)


def test_patchify_rejects_non_divisible():
    with pytest.raises(ShapeError):
        patchify(Tensor(np.zeros((1, 3, 4))), 2)


# ---------------------------------------------------------------------------
# AdaLN


def test_adaln_zero_heads_give_plain_layer_norm_and_zero_gate():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(5, 8)))
    cond = Tensor(rng.normal(size=(1, 8)))
    w, b = Tensor(np.zeros((8, 24))), Tensor(np.zeros(24))
    y, gate = adaln_modulate(x, cond, w, b)
    np.testing.assert_array_equal(y.data, T.layer_norm(x).data)
    np.testing.assert_array_equal(gate.data, np.zeros((5, 8)))


def test_adaln_head_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    cfg = ModelConfig(depth=1, hidden_dim=8, heads=2, latent_shape=(1, 4, 4),
                      patch_size=2, text_tokens=2, text_embed_dim=4)
    params = randomize(ModelParams.init(cfg, rng), rng)
    z, t, text = random_inputs(cfg, rng)
    name = "blocks.0.img.attn_mod.w"

    def loss_for(arr):
        trial = ModelParams(cfg, {**params.arrays, name: arr.data})
        vel, _ = mmdit_forward(z, t, text, trial)
        return T.mean(T.square(vel))

    tape = Tape()
    tensors = params.as_tensors(tape)
    vel, _ = mmdit_forward(z, t, text, params, tensors=tensors)
    T.mean(T.square(vel)).backward()
    analytic = tape.grad(tensors[name]).data
    fd = T.finite_diff_grad(loss_for, Tensor(params.arrays[name])).data
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-8)
    assert np.max(np.abs(analytic - fd) / denom) < 1e-5


# ---------------------------------------------------------------------------
# joint attention


def _attn_params(cfg, rng, shared=False):
    p = {}
    for stream in ("img", "txt"):
        src = "img" if shared else stream
        for proj in ("wq", "wk", "wv", "wo"):
            key = f"blocks.0.{stream}.{proj}"
            p[key] = p.get(f"blocks.0.{src}.{proj}", Tensor(rng.normal(size=(cfg.hidden_dim,) * 2)))
        for bias in ("bq", "bk", "bv", "bo"):
            key = f"blocks.0.{stream}.{bias}"
            p[key] = p.get(f"blocks.0.{src}.{bias}", Tensor(rng.normal(size=cfg.hidden_dim)))
    return p


def test_joint_attention_identical_values_pass_through():
    cfg = ModelConfig(depth=1, hidden_dim=4, heads=1, latent_shape=(1, 2, 2),
                      patch_size=2, text_tokens=1, text_embed_dim=4)
    rng = np.random.default_rng(3)
    v = rng.normal(size=4)
    p = {}
    for stream in ("img", "txt"):
        p[f"blocks.0.{stream}.wq"] = Tensor(rng.normal(size=(4, 4)))
        p[f"blocks.0.{stream}.wk"] = Tensor(rng.normal(size=(4, 4)))
        p[f"blocks.0.{stream}.wv"] = Tensor(np.zeros((4, 4)))
        p[f"blocks.0.{stream}.bv"] = Tensor(v)  # every value vector equals v
        p[f"blocks.0.{stream}.wo"] = Tensor(np.eye(4))
        for bias in ("bq", "bk", "bo"):
            p[f"blocks.0.{stream}.{bias}"] = Tensor(np.zeros(4))
    img_out, txt_out = joint_attention(Tensor(rng.normal(size=(1, 4))),
                                       Tensor(rng.normal(size=(1, 4))), p, 0, cfg)
    np.testing.assert_allclose(img_out.data, v[None, :], rtol=1e-12)
    np.testing.assert_allclose(txt_out.data, v[None, :], rtol=1e-12)


def test_joint_attention_uniform_logits_average_values():
    cfg = ModelConfig(depth=1, hidden_dim=4, heads=2, latent_shape=(1, 2, 2),
                      patch_size=2, text_tokens=2, text_embed_dim=4)
    rng = np.random.default_rng(4)
    p = _attn_params(cfg, rng)
    for stream in ("img", "txt"):
        p[f"blocks.0.{stream}.wq"] = Tensor(np.zeros((4, 4)))  # zero queries
        p[f"blocks.0.{stream}.bq"] = Tensor(np.zeros(4))
        p[f"blocks.0.{stream}.wo"] = Tensor(np.eye(4))
        p[f"blocks.0.{stream}.bo"] = Tensor(np.zeros(4))
    img = rng.normal(size=(1, 4))
    txt = rng.normal(size=(2, 4))
    img_out, txt_out = joint_attention(Tensor(img), Tensor(txt), p, 0, cfg)
    values = np.concatenate([
        img @ p["blocks.0.img.wv"].data + p["blocks.0.img.bv"].data,
        txt @ p["blocks.0.txt.wv"].data + p["blocks.0.txt.bv"].data,
    ])
    expected = values.mean(axis=0)
    np.testing.assert_allclose(img_out.data[0], expected, rtol=1e-12)
    np.testing.assert_allclose(txt_out.data, np.tile(expected, (2, 1)), rtol=1e-12)


def test_joint_attention_equals_single_sequence_attention():
    # brute-force oracle: shared projections make joint attention identical to
    # plain attention over the concatenated sequence
    cfg = ModelConfig(depth=1, hidden_dim=4, heads=2, latent_shape=(1, 2, 2),
                      patch_size=2, text_tokens=2, text_embed_dim=4)
    rng = np.random.default_rng(5)
    p = _attn_params(cfg, rng, shared=True)
    img = rng.normal(size=(2, 4))
    txt = rng.normal(size=(2, 4))

    img_out, txt_out = joint_attention(Tensor(img), Tensor(txt), p, 0, cfg)

    seq = np.concatenate([img, txt])
    wq, bq = p["blocks.0.img.wq"].data, p["blocks.0.img.bq"].data
    wk, bk = p["blocks.0.img.wk"].data, p["blocks.0.img.bk"].data
    wv, bv = p["blocks.0.img.wv"].data, p["blocks.0.img.bv"].data
    wo, bo = p["blocks.0.img.wo"].data, p["blocks.0.img.bo"].data
    q, k, v = seq @ wq + bq, seq @ wk + bk, seq @ wv + bv
    hd = 2
    outs = []
    for h in range(2):
        qi, ki, vi = q[:, h * hd:(h + 1) * hd], k[:, h * hd:(h + 1) * hd], v[:, h * hd:(h + 1) * hd]
        logits = qi @ ki.T / math.sqrt(hd)
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        outs.append(w @ vi)
    ref = np.concatenate(outs, axis=1) @ wo + bo
    np.testing.assert_allclose(np.concatenate([img_out.data, txt_out.data]), ref, rtol=1e-12)


def test_text_permutation_equivariance():
    cfg = TINY
    rng = np.random.default_rng(6)
    params = randomize(ModelParams.init(cfg, rng), rng)
    z, t, text = random_inputs(cfg, rng)
    perm = rng.permutation(cfg.text_tokens)

    vel, tapped = mmdit_forward(z, t, text, params, tap=FeatureTap(cfg.depth))
    vel_p, tapped_p = mmdit_forward(z, t, text[perm], params, tap=FeatureTap(cfg.depth))
    np.testing.assert_allclose(vel_p.data, vel.data, atol=1e-12)
    np.testing.assert_allclose(tapped_p.data, tapped.data, atol=1e-12)


# ---------------------------------------------------------------------------
# full forward


def test_zero_init_model_outputs_zero_velocity():
    rng = np.random.default_rng(9)
    params = ModelParams.init(TINY, rng)
    z, t, text = random_inputs(TINY, rng)
    vel, _ = mmdit_forward(z, t, text, params)
    np.testing.assert_array_equal(vel.data, np.zeros(TINY.latent_shape))


def test_tap_is_read_only_bitwise():
    rng = np.random.default_rng(10)
    params = randomize(ModelParams.init(TINY, rng), rng)
    z, t, text = random_inputs(TINY, rng)
    vel_none, tapped_none = mmdit_forward(z, t, text, params, tap=None)
    assert tapped_none is None
    for depth_n in range(1, TINY.depth + 1):
        vel_tap, tapped = mmdit_forward(z, t, text, params, tap=FeatureTap(depth_n))
        assert np.array_equal(vel_tap.data, vel_none.data)
        assert tapped.shape == (TINY.num_patches, TINY.hidden_dim)


def test_tapped_shape_on_default_config():
    cfg = ModelConfig()
    rng = np.random.default_rng(11)
    params = ModelParams.init(cfg, rng)
    z, t, text = random_inputs(cfg, rng)
    _, tapped = mmdit_forward(z, t, text, params, tap=FeatureTap(3))
    assert tapped.shape == (16, 64)


def test_forward_rejects_time_outside_unit_interval():
    rng = np.random.default_rng(12)
    params = ModelParams.init(TINY, rng)
    z, _, text = random_inputs(TINY, rng)
    with pytest.raises(ValueError):
        mmdit_forward(z, 1.5, text, params)
    with pytest.raises(ValueError):
        mmdit_forward(z, -0.1, text, params)


def test_forward_rejects_bad_tap_depth():
    rng = np.random.default_rng(13)
    params = ModelParams.init(TINY, rng)
    z, t, text = random_inputs(TINY, rng)
    with pytest.raises(ValueError):
        mmdit_forward(z, t, text, params, tap=FeatureTap(0))
    with pytest.raises(ValueError):
        mmdit_forward(z, t, text, params, tap=FeatureTap(TINY.depth + 1))


def test_param_count_is_pure_function_of_config():
    a = ModelParams.init(TINY, np.random.default_rng(1))
    b = ModelParams.init(TINY, np.random.default_rng(2))
    assert a.num_params() == b.num_params()
    assert a.names() == b.names()


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(hidden_dim=10, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(latent_shape=(4, 7, 8), patch_size=2)


def test_identity_at_init_blocks_preserve_streams():
    # with zero-init modulation heads, gates are zero so blocks add nothing;
    # probe by checking the tap equals the embedded input at every depth
    rng = np.random.default_rng(14)
    params = ModelParams.init(TINY, rng)
    z, t, text = random_inputs(TINY, rng)
    taps = [mmdit_forward(z, t, text, params, tap=FeatureTap(n))[1].data
            for n in range(1, TINY.depth + 1)]
    for tapped in taps[1:]:
        np.testing.assert_array_equal(tapped, taps[0])


def test_full_model_gradients_match_finite_differences_tiny():
    # every parameter of a randomized depth-2 model, fm-style loss
    rng = np.random.default_rng(15)
    cfg = ModelConfig(depth=2, hidden_dim=8, heads=2, latent_shape=(1, 4, 4),
                      patch_size=2, text_tokens=2, text_embed_dim=4, mlp_ratio=2)
    params = randomize(ModelParams.init(cfg, rng), rng)
    z, t, text = random_inputs(cfg, rng)
    target = rng.normal(size=cfg.latent_shape)

    tape = Tape()
    tensors = params.as_tensors(tape)
    vel, _ = mmdit_forward(z, t, text, params, tensors=tensors)
    loss = T.mean(T.square(vel - Tensor(target)))
    loss.backward()

    worst = 0.0
    for name in params.names():
        def loss_for(arr, name=name):
            trial = ModelParams(cfg, {**params.arrays, name: arr.data})
            v, _ = mmdit_forward(z, t, text, trial)
            return T.mean(T.square(v - Tensor(target)))

        analytic = tape.grad(tensors[name]).data
        fd = T.finite_diff_grad(loss_for, Tensor(params.arrays[name])).data
        # denominator floor 1e-4 absorbs the oracle's own roundoff
        # (~1e-11 absolute at h=1e-5) on near-zero gradients
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-4)
        worst = max(worst, float(np.max(np.abs(analytic - fd) / denom)))
    assert worst < 1e-5, f"worst rel err {worst}"
