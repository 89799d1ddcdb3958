import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pharnet import generator as G
from pharnet import tensor as T
from pharnet.config import desk_config
from pharnet.tensor import MOMENT_EPS, ShapeError, Tensor


@pytest.fixture(scope="module")
def gen():
    g = G.Generator(desk_config())
    g.init(0)
    return g


def _img(shape, seed=0):
    return Tensor(np.random.default_rng(seed).random(shape).astype(np.float32))


def _box_mask(n, h, w, boxes):
    m = np.zeros((n, 1, h, w), np.float32)
    for top, left, bh, bw in boxes:
        m[:, :, top : top + bh, left : left + bw] = 1
    return Tensor(m)


# -- encoders ---------------------------------------------------------------------


@pytest.mark.parametrize(
    "h, w, extents",
    [
        (256, 256, [(256, 256), (128, 128), (64, 64), (32, 32)]),
        (320, 192, [(320, 192), (160, 96), (80, 48), (40, 24)]),
    ],
)
def test_main_encoder_extents(gen, h, w, extents):
    taps = gen.encode_main(_img((1, 3, h, w)))
    assert [t.shape[2:] for t in taps] == extents
    width = gen.config.width
    assert [t.shape[1] for t in taps] == [width, 2 * width, 4 * width, 8 * width]


def test_main_encoder_rejects_indivisible(gen):
    with pytest.raises(ShapeError, match="pad"):
        gen.encode_main(_img((1, 3, 60, 64)))


def test_main_encoder_deterministic_and_frozen(gen):
    x = _img((1, 3, 64, 64), seed=3)
    a, b = gen.encode_main(x), gen.encode_main(x)
    for ta, tb in zip(a, b):
        np.testing.assert_array_equal(ta.data, tb.data)
    assert not gen.encoder.store.trainable
    assert all(not t.requires_grad for t in gen.encoder.store.params.values())
    assert not gen.encoder.store.adam


def test_gradient_flows_through_frozen_encoder(gen):
    x = Tensor(np.random.default_rng(0).random((1, 3, 16, 16)), requires_grad=True)
    T.sum(gen.encode_main(x)[-1]).backward()
    assert x.grad is not None and np.any(x.grad != 0)
    assert all(t.grad is None for t in gen.encoder.store.params.values())


@pytest.mark.parametrize("h, w", [(256, 256), (320, 192)])
def test_residual_features_match_pyramid(gen, h, w):
    img, mask = _img((1, 3, h, w)), _box_mask(1, h, w, [(8, 8, 40, 40)])
    res = gen.residual_encoder(img, mask)
    main = gen.encode_main(img)
    assert [r.shape for r in res] == [m.shape for m in main]


def test_residual_encoder_zeroed_weights_give_zero():
    g = G.Generator(desk_config())
    g.init(0)
    for t in g.residual_encoder.store.params.values():
        t.data[...] = 0
    res = g.residual_encoder(_img((2, 3, 32, 32)), _box_mask(2, 32, 32, [(0, 0, 8, 8)]))
    assert all(np.all(r.data == 0) for r in res)


def test_gradients_reach_every_residual_encoder_param():
    g = G.Generator(desk_config())
    g.init(1)
    res = g.residual_encoder(_img((2, 3, 32, 32), seed=4), _box_mask(2, 32, 32, [(4, 4, 12, 12)]))
    T.sum(T.square(res[3])).backward()
    for path, t in g.residual_encoder.store.params.items():
        assert t.grad is not None and np.any(t.grad != 0), path


# -- mask pyramid ---------------------------------------------------------------------


def test_mask_pyramid_all_ones():
    for m in G.resize_mask_pyramid(Tensor(np.ones((1, 1, 16, 16)))):
        assert np.all(m.data == 1)


def test_mask_pyramid_single_pixel():
    m = np.zeros((1, 1, 8, 8))
    m[..., 0, 0] = 1
    pyr = G.resize_mask_pyramid(Tensor(m))
    assert [p.shape[2:] for p in pyr] == [(8, 8), (4, 4), (2, 2), (1, 1)]
    for p in pyr:
        assert p.data.sum() == 1 and p.data[0, 0, 0, 0] == 1


def _components(a: np.ndarray) -> int:
    seen = np.zeros_like(a, bool)
    count = 0
    for i, j in zip(*np.nonzero(a)):
        if seen[i, j]:
            continue
        count += 1
        stack = [(i, j)]
        while stack:
            y, x = stack.pop()
            if 0 <= y < a.shape[0] and 0 <= x < a.shape[1] and a[y, x] and not seen[y, x]:
                seen[y, x] = True
                stack += [(y + 1, x), (y - 1, x), (y, x + 1), (y, x - 1)]
    return count


def test_mask_pyramid_keeps_disjoint_regions():
    mask = _box_mask(1, 64, 64, [(0, 0, 16, 16), (40, 40, 16, 16)])
    for p in G.resize_mask_pyramid(mask):
        assert _components(p.data[0, 0]) == 2


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mask_pyramid_matches_maxpool_oracle(seed):
    m = (np.random.default_rng(seed).random((1, 1, 16, 16)) > 0.9).astype(np.float64)
    pyr = G.resize_mask_pyramid(Tensor(m))
    ref = m[0, 0]
    for p in pyr[1:]:
        ref = ref.reshape(ref.shape[0] // 2, 2, ref.shape[1] // 2, 2).max(axis=(1, 3))
        np.testing.assert_array_equal(p.data[0, 0], ref)
        assert set(np.unique(p.data)) <= {0.0, 1.0}


def test_mask_pyramid_rejects_non_binary():
    with pytest.raises(ShapeError, match="binary"):
        G.resize_mask_pyramid(Tensor(np.full((1, 1, 4, 4), 0.5)))


# -- AdaIN / injection / blending -------------------------------------------------------


def test_adain_numeric_case():
    fc = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    fs = Tensor(np.full((1, 1, 2, 2), 10.0))
    m = Tensor(np.array([[[[1.0, 1.0], [0.0, 0.0]]]]))
    out = G.adain_stylize(fc, fs, m).data[0, 0]
    scale = np.sqrt(MOMENT_EPS) / np.sqrt(0.25 + MOMENT_EPS)
    np.testing.assert_allclose(out[0], [10 - 0.5 * scale, 10 + 0.5 * scale], rtol=0, atol=1e-12)
    np.testing.assert_allclose(out[0], [10, 10], atol=5e-3)
    np.testing.assert_array_equal(out[1], [3.0, 4.0])


def test_adain_background_bit_exact_and_moments():
    rng = np.random.default_rng(0)
    fc, fs = Tensor(rng.random((2, 3, 8, 8))), Tensor(rng.random((2, 3, 8, 8)) * 2 + 1)
    m = np.zeros((2, 1, 8, 8))
    m[..., :4, :] = 1
    out = G.adain_stylize(fc, fs, Tensor(m))
    np.testing.assert_array_equal(out.data[..., 4:, :], fc.data[..., 4:, :])
    mu_a, sd_a = T.masked_moments(out, Tensor(m))
    mu_s, sd_s = T.masked_moments(fs)
    np.testing.assert_allclose(mu_a.data, mu_s.data, rtol=1e-4)
    # the eps in both stds biases the match by at most eps / (2 var)
    np.testing.assert_allclose(sd_a.data, sd_s.data, rtol=1e-3)


def test_adain_rejects_empty_mask():
    x = Tensor(np.ones((1, 1, 2, 2)))
    with pytest.raises(ShapeError, match="empty"):
        G.adain_stylize(x, x, Tensor(np.zeros((1, 1, 2, 2))))


def test_inject_residual():
    rng = np.random.default_rng(0)
    a, r = Tensor(rng.random((1, 2, 4, 4))), Tensor(rng.random((1, 2, 4, 4)))
    m = np.zeros((1, 1, 4, 4))
    m[..., 1:3, 1:3] = 1
    zero = Tensor(np.zeros((1, 2, 4, 4)))
    np.testing.assert_array_equal(G.inject_residual(a, zero, Tensor(m), 1, (1, 2, 3, 4)).data, a.data)
    out = G.inject_residual(a, r, Tensor(m), 2, (1, 2, 3, 4)).data
    np.testing.assert_array_equal(out[..., 0, :], a.data[..., 0, :])
    np.testing.assert_allclose(out[..., 1:3, 1:3], (a.data + r.data)[..., 1:3, 1:3])
    for layer in (1, 2):
        assert G.inject_residual(a, r, Tensor(m), layer, (3, 4)) is a


@pytest.mark.parametrize("soft, expected", [(1.0, "raw"), (0.0, "bg"), (0.5, 0.5)])
def test_blend_forced_masks(soft, expected):
    raw, bg = Tensor(np.ones((1, 3, 4, 4))), Tensor(np.zeros((1, 3, 4, 4)))
    if expected == "raw":
        raw = Tensor(np.random.default_rng(0).random((1, 3, 4, 4)))
        bg = Tensor(np.random.default_rng(1).random((1, 3, 4, 4)))
    out = G.blend_images(raw, bg, Tensor(np.full((1, 1, 4, 4), soft))).data
    if expected == "raw":
        np.testing.assert_array_equal(out, raw.data)
    elif expected == "bg":
        np.testing.assert_array_equal(out, bg.data)
    else:
        np.testing.assert_array_equal(out, np.full_like(out, expected))


# -- full harmonize -------------------------------------------------------------------------


@pytest.mark.parametrize("h, w", [(256, 256), (320, 192)])
def test_harmonize_preserves_shape(gen, h, w):
    with T.no_grad():
        out = gen.harmonize(_img((1, 3, h, w)), _img((1, 3, h, w), 1), _box_mask(1, h, w, [(16, 16, 64, 64)]))
    assert out.output.shape == (1, 3, h, w)
    assert out.soft_mask.shape == (1, 1, h, w)
    assert out.raw.shape == (1, 3, h, w)
    assert 0 < out.soft_mask.data.min() and out.soft_mask.data.max() < 1


def test_harmonize_rejects_empty_mask(gen):
    with pytest.raises(ShapeError, match="empty"):
        gen.harmonize(_img((1, 3, 64, 64)), _img((1, 3, 64, 64)), Tensor(np.zeros((1, 1, 64, 64), np.float32)))


def test_harmonize_two_components(gen):
    mask = _box_mask(1, 64, 64, [(0, 0, 16, 16), (40, 40, 16, 16)])
    comp = _img((1, 3, 64, 64), 2)
    with T.no_grad():
        out = gen.harmonize(comp, _img((1, 3, 64, 64), 3), mask)
    for l, m in enumerate(out.masks):
        assert _components(m.data[0, 0]) == 2
    # both regions were stylized
    a, c = out.stylized[0].data, out.content_feats[0].data
    assert np.any(a[..., :16, :16] != c[..., :16, :16])
    assert np.any(a[..., 40:56, 40:56] != c[..., 40:56, 40:56])


def test_batch_independence_in_eval_mode():
    g = G.Generator(desk_config())
    g.init(2)
    g.train(False)
    comp, bg = _img((2, 3, 64, 64), 4), _img((2, 3, 64, 64), 5)
    mask = _box_mask(2, 64, 64, [(8, 8, 24, 24)])
    mask.data[1] = 0
    mask.data[1, :, 30:50, 20:50] = 1
    with T.no_grad():
        both = g.harmonize(comp, bg, mask).output.data
        for i in range(2):
            single = g.harmonize(Tensor(comp.data[i : i + 1]), Tensor(bg.data[i : i + 1]), Tensor(mask.data[i : i + 1]))
            np.testing.assert_allclose(both[i], single.output.data[0], rtol=0, atol=1e-5)


def test_without_residual_encoder_pipeline_is_adain_plus_decoder():
    cfg = desk_config().with_ablation("V1")
    g = G.Generator(cfg)
    g.init(0)
    comp, bg, mask = _img((1, 3, 64, 64)), _img((1, 3, 64, 64), 1), _box_mask(1, 64, 64, [(8, 8, 20, 20)])
    with T.no_grad():
        out = g.harmonize(comp, bg, mask)
    assert out.residual == []
    assert all(r is s for r, s in zip(out.refined, out.stylized))


def test_hard_composite_without_blending():
    cfg = desk_config(use_blending=False)
    g = G.Generator(cfg)
    g.init(0)
    comp, bg, mask = _img((1, 3, 64, 64)), _img((1, 3, 64, 64), 1), _box_mask(1, 64, 64, [(8, 8, 20, 20)])
    with T.no_grad():
        out = g.harmonize(comp, bg, mask)
    m = mask.data
    np.testing.assert_allclose(out.output.data, out.raw.data * m + bg.data * (1 - m))
    assert g.blend_head.store not in g.trainable_stores()


def test_generator_gradients_reach_decoder_and_residual_encoder():
    g = G.Generator(desk_config())
    g.init(0)
    comp, bg, mask = _img((2, 3, 32, 32)), _img((2, 3, 32, 32), 1), _box_mask(2, 32, 32, [(4, 4, 12, 12)])
    out = g.harmonize(comp, bg, mask)
    T.sum(T.square(out.raw)).backward()
    for store in (g.decoder.store, g.residual_encoder.store):
        for path, t in store.params.items():
            assert t.grad is not None and np.any(t.grad != 0), path
    assert all(t.grad is None for t in g.encoder.store.params.values())


def test_residual_layers_default():
    assert desk_config().residual_layers == (1, 2, 3, 4)
