import numpy as np
import pytest

from hglora import autodiff as ad
from hglora import encoder as enc
from hglora import lora


def image_config(**kw):
    base = dict(num_layers=2, num_heads=2, model_dim=16, mlp_hidden=32, side=4, patch_dim=6)
    base.update(kw)
    return enc.EncoderConfig(**base)


def text_config(**kw):
    base = dict(num_layers=2, num_heads=2, model_dim=16, mlp_hidden=32, vocab_size=64, max_len=12)
    base.update(kw)
    return enc.EncoderConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        image_config(model_dim=15)
    with pytest.raises(ValueError):
        enc.EncoderConfig(2, 2, 16, 32)  # neither image nor text
    with pytest.raises(ValueError):
        enc.EncoderConfig(2, 2, 16, 32, side=4, patch_dim=6, vocab_size=64, max_len=12)


def test_embed_image_shapes_and_order():
    stack = enc.EncoderStack.build(image_config(side=2), seed=0)
    grid = np.zeros((2, 2, 6))
    seq = enc.embed_image(grid, stack)
    assert seq.shape == (5, 16)  # N = side^2 plus the global slot


def test_embed_image_zero_grid_zero_projection():
    stack = enc.EncoderStack.build(image_config(), seed=0)
    stack.token_embed.data = np.zeros_like(stack.token_embed.data)
    seq = enc.embed_image(np.zeros((4, 4, 6)), stack)
    np.testing.assert_array_equal(
        seq.data[0], (stack.cls_embed.data[0] + stack.pos_embed.data[0])
    )
    np.testing.assert_array_equal(seq.data[1:], stack.pos_embed.data[1:])


def test_embed_image_one_hot_projection_row():
    stack = enc.EncoderStack.build(image_config(side=2), seed=1)
    grid = np.zeros((2, 2, 6))
    grid[0, 0, 3] = 1.0  # one-hot on patch 0, channel 3
    seq = enc.embed_image(grid, stack)
    expected = stack.token_embed.data[3] + stack.pos_embed.data[1]
    np.testing.assert_allclose(seq.data[1], expected)


def test_embed_image_extent_mismatch():
    stack = enc.EncoderStack.build(image_config(), seed=0)
    with pytest.raises(ad.ShapeError):
        enc.embed_image(np.zeros((3, 4, 6)), stack)


def test_embed_text_empty_is_cls_only():
    stack = enc.EncoderStack.build(text_config(), seed=0)
    seq, mask = enc.embed_text([], stack)
    assert seq.shape == (1, 16)
    assert mask.tolist() == [True]


def test_embed_text_deterministic():
    stack = enc.EncoderStack.build(text_config(), seed=0)
    s1, _ = enc.embed_text([3, 1, 4], stack)
    s2, _ = enc.embed_text([3, 1, 4], stack)
    np.testing.assert_array_equal(s1.data, s2.data)


def test_embed_text_bounds():
    stack = enc.EncoderStack.build(text_config(max_len=3), seed=0)
    with pytest.raises(ValueError):
        enc.embed_text([1, 2, 3, 4], stack)
    with pytest.raises(ValueError):
        enc.embed_text([99], stack)


def test_embed_text_padding_mask():
    stack = enc.EncoderStack.build(text_config(), seed=0)
    seq, mask = enc.embed_text([5, 6], stack, pad_to=5)
    assert seq.shape == (6, 16)
    assert mask.tolist() == [True, True, True, False, False, False]


def test_encode_zero_weights_uniform_attention():
    cfg = image_config(side=2)
    stack = enc.EncoderStack.build(cfg, seed=0)
    for arr in stack.weight_arrays():
        arr[...] = 0.0
    trace = enc.encode(enc.embed_image(np.zeros((2, 2, 6)), stack), stack)
    np.testing.assert_array_equal(trace.tokens.data, np.zeros((5, 16)))
    for layer_maps in trace.attention:
        for head_map in layer_maps:
            np.testing.assert_allclose(head_map.data, np.full((5, 5), 0.2), atol=1e-15)


def test_encode_single_head_matches_direct_attention():
    # d=2, N=2, one layer, one head: attention must equal a hand evaluation
    # of softmax(Q K^T / sqrt(d)) on layer-normalized inputs.
    cfg = enc.EncoderConfig(1, 1, 2, 4, side=None, patch_dim=None, vocab_size=8, max_len=4)
    stack = enc.EncoderStack.build(cfg, seed=3)
    seq, mask = enc.embed_text([1, 2], stack)
    trace = enc.encode(seq, stack, mask=mask)

    x = seq.data
    lw = stack.layers[0]
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    xn = (x - mu) / np.sqrt(var + 1e-5) * lw.ln1_g.data + lw.ln1_b.data
    # projections apply in the tokens-as-columns convention: row-major x @ W.T
    q = xn @ lw.wq.data.T
    k = xn @ lw.wk.data.T
    scores = q @ k.T / np.sqrt(2.0)
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    expected = e / e.sum(axis=-1, keepdims=True)
    np.testing.assert_allclose(trace.attention[0][0].data, expected, atol=1e-12)


def test_encode_attention_rows_sum_to_one_and_mask_zeroed():
    stack = enc.EncoderStack.build(text_config(), seed=5)
    seq, mask = enc.embed_text([1, 2, 3], stack, pad_to=7)
    trace = enc.encode(seq, stack, mask=mask)
    for layer_maps in trace.attention:
        for head_map in layer_maps:
            np.testing.assert_allclose(head_map.data.sum(axis=-1), 1.0, atol=1e-10)
            assert np.all(head_map.data[:, ~mask] == 0.0)


def test_encode_zero_init_adapters_bit_identical():
    cfg = image_config()
    stack = enc.EncoderStack.build(cfg, seed=7)
    adapters = {
        (layer, mat): lora.init_lora(16, 16, 4, 1.0, seed=[9, layer, i])
        for layer in range(cfg.num_layers)
        for i, mat in enumerate(("q", "k", "v"))
    }
    rng = np.random.default_rng(0)
    for trial in range(5):
        grid = rng.normal(size=(4, 4, 6))
        plain = enc.encode(enc.embed_image(grid, stack), stack)
        adapted = enc.encode(enc.embed_image(grid, stack), stack, adapters=adapters)
        assert np.array_equal(plain.tokens.data, adapted.tokens.data)
        for lm_p, lm_a in zip(plain.attention, adapted.attention):
            for hp, ha in zip(lm_p, lm_a):
                assert np.array_equal(hp.data, ha.data)


def test_encode_adapter_target_out_of_range():
    cfg = image_config()
    stack = enc.EncoderStack.build(cfg, seed=0)
    bad = {(9, "q"): lora.init_lora(16, 16, 4, 1.0, seed=0)}
    with pytest.raises(ValueError):
        enc.encode(enc.embed_image(np.zeros((4, 4, 6)), stack), stack, adapters=bad)


def test_encode_patch_permutation_equivariance():
    cfg = image_config(side=2)
    stack = enc.EncoderStack.build(cfg, seed=11)
    rng = np.random.default_rng(4)
    grid = rng.normal(size=(2, 2, 6))
    out = enc.encode(enc.embed_image(grid, stack), stack).tokens.data

    perm = np.array([2, 0, 3, 1])  # permutation of the 4 patches
    grid_p = grid.reshape(4, 6)[perm].reshape(2, 2, 6)
    pos = stack.pos_embed.data.copy()
    stack.pos_embed.data[1:] = pos[1:][perm]
    try:
        out_p = enc.encode(enc.embed_image(grid_p, stack), stack).tokens.data
    finally:
        stack.pos_embed.data = pos
    np.testing.assert_allclose(out_p[0], out[0], atol=1e-10)
    np.testing.assert_allclose(out_p[1:], out[1:][perm], atol=1e-10)


def test_encode_gradients_reach_adapters():
    cfg = image_config(side=2, model_dim=8, mlp_hidden=8)
    stack = enc.EncoderStack.build(cfg, seed=2)
    adapters = {
        (0, "q"): lora.init_lora(8, 8, 2, 1.0, seed=1),
        (1, "v"): lora.init_lora(8, 8, 2, 1.0, seed=2),
    }
    rng = np.random.default_rng(8)
    for a in adapters.values():
        a.b.data = rng.normal(size=a.b.shape) * 0.3
    grid = rng.normal(size=(2, 2, 6))
    probe = rng.normal(size=(5, 8))

    def build():
        trace = enc.encode(enc.embed_image(grid, stack), stack, adapters=adapters)
        return ad.tsum(ad.mul(trace.tokens, ad.Tensor(probe)))

    params = [t for a in adapters.values() for t in (a.a, a.b)]
    analytic = ad.backward(build())

    def f():
        with ad.no_grad():
            return build().item()

    numeric = ad.finite_diff_grad(f, params, 1e-6)
    for p in params:
        np.testing.assert_allclose(analytic[p], numeric[p], rtol=5e-5, atol=1e-8)
