import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhitnet.errors import ConfigurationError, DimensionError, GeometryError
from mhitnet.layers import (
    AttentionProjection,
    AxialAttention,
    BatchNorm2d,
    Conv2d,
    Module,
    bilinear_resize,
    conv2d,
    conv_output_size,
    max_pool2x2,
    relative_index,
    self_attention,
)
from mhitnet.tensor import Tensor


def naive_conv(x, w, b, stride, pad, dil):
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - dil * (k - 1) - 1) // stride + 1
    Wo = (W + 2 * pad - dil * (k - 1) - 1) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if b is None else b[o]
                    for c in range(C):
                        for u in range(k):
                            for v in range(k):
                                acc += w[o, c, u, v] * xp[n, c, i * stride + u * dil, j * stride + v * dil]
                    out[n, o, i, j] = acc
    return out


def naive_bilinear(img, out_h, out_w):
    H, W = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        sy = min(max((i + 0.5) * H / out_h - 0.5, 0.0), H - 1)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, H - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = min(max((j + 0.5) * W / out_w - 0.5, 0.0), W - 1)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, W - 1)
            fx = sx - x0
            top = (1 - fx) * img[y0, x0] + fx * img[y0, x1]
            bot = (1 - fx) * img[y1, x0] + fx * img[y1, x1]
            out[i, j] = (1 - fy) * top + fy * bot
    return out


@pytest.mark.parametrize("k,stride,pad,dil", [(1, 1, 0, 1), (3, 1, 1, 1), (3, 2, 1, 1), (3, 1, 2, 2),
                                              (3, 2, 3, 3), (3, 1, 0, 1), (1, 2, 0, 1)])
def test_conv_matches_direct_summation(k, stride, pad, dil, rng):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    got = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64),
                 stride, pad, dil).data
    np.testing.assert_allclose(got, naive_conv(x, w, b, stride, pad, dil), rtol=1e-12, atol=1e-12)


def test_conv_output_size_formula():
    assert conv_output_size(64, 3, 1, 1, 1) == 64
    assert conv_output_size(64, 3, 2, 1, 1) == 32
    assert conv_output_size(16, 3, 1, 18, 18) == 16


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError, match="channels"):
        conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv_kernel_larger_than_input():
    with pytest.raises(GeometryError):
        conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), dilation=3)


def test_conv_layer_rejects_even_kernel():
    with pytest.raises(ConfigurationError):
        Conv2d(1, 1, 2)


def test_conv_default_padding_keeps_size():
    conv = Conv2d(2, 3, 3, dilation=5)
    assert conv(Tensor(np.zeros((1, 2, 8, 8)))).shape == (1, 3, 8, 8)


def test_batch_norm_train_normalises_and_tracks_biased_variance(rng):
    bn = BatchNorm2d(3)
    x = rng.normal(2.0, 3.0, size=(4, 3, 5, 5))
    y = bn(Tensor(x, dtype=np.float64)).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, rtol=1e-4)
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-5)
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), rtol=1e-5)


def test_batch_norm_eval_uses_running_statistics():
    bn = BatchNorm2d(1).eval()
    bn.running_mean[...] = 2.0
    bn.running_var[...] = 4.0
    y = bn(Tensor(np.full((1, 1, 2, 2), 6.0), dtype=np.float64)).data
    np.testing.assert_allclose(y, 4.0 / np.sqrt(4.0 + 1e-5))


def test_batch_norm_single_value_population():
    with pytest.raises(GeometryError):
        BatchNorm2d(2)(Tensor(np.zeros((1, 2, 1, 1))))


def test_max_pool_matches_oracle_and_breaks_ties_to_first(rng):
    x = rng.standard_normal((2, 2, 4, 6))
    got = max_pool2x2(Tensor(x, dtype=np.float64)).data
    want = x.reshape(2, 2, 2, 2, 3, 2).max(axis=(3, 5))
    np.testing.assert_array_equal(got, want)
    t = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True, dtype=np.float64)
    max_pool2x2(t).backward()
    np.testing.assert_array_equal(t.grad[0, 0], [[1, 0], [0, 0]])


def test_max_pool_odd_size():
    with pytest.raises(GeometryError):
        max_pool2x2(Tensor(np.zeros((1, 1, 3, 4))))


@pytest.mark.parametrize("out", [(8, 8), (3, 5), (4, 4), (10, 2), (1, 1)])
def test_bilinear_matches_per_pixel_oracle(out, rng):
    img = rng.standard_normal((4, 4))
    got = bilinear_resize(Tensor(img[None, None], dtype=np.float64), *out).data[0, 0]
    np.testing.assert_allclose(got, naive_bilinear(img, *out), rtol=1e-12, atol=1e-12)


def test_bilinear_two_to_four_half_pixel_values():
    # centres map to -0.25, 0.25, 0.75, 1.25 -> clamp -> 0, 0.25, 0.75, 1
    got = bilinear_resize(Tensor(np.array([[[[0.0, 1.0]]]]), dtype=np.float64), 1, 4).data
    np.testing.assert_array_equal(got[0, 0, 0], [0.0, 0.25, 0.75, 1.0])


@settings(max_examples=30, deadline=None)
@given(st.floats(-100, 100, allow_nan=False, width=32), st.integers(1, 9), st.integers(1, 9),
       st.integers(1, 9), st.integers(1, 9))
def test_bilinear_preserves_constants_exactly(c, h, w, oh, ow):
    x = Tensor(np.full((1, 2, h, w), c, dtype=np.float32))
    assert np.all(bilinear_resize(x, oh, ow).data == np.float32(c))


def test_self_attention_matches_numpy(rng):
    x = rng.standard_normal((5, 8))
    proj = AttentionProjection(8, 1, rng).to(np.float64)
    q, k, v = x @ proj.w_q.data, x @ proj.w_k.data, x @ proj.w_v.data
    for scaled, factor in ((True, 1 / np.sqrt(8)), (False, 1.0)):
        s = q @ k.T * factor
        a = np.exp(s - s.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        got = self_attention(Tensor(x, dtype=np.float64), proj, scaled).data
        np.testing.assert_allclose(got, a @ v, rtol=1e-10)


def test_relative_index_layout():
    idx = relative_index(3, 4)
    # entry [j, w] = w - j + span - 1
    assert idx.tolist() == [[3, 4, 5], [2, 3, 4], [1, 2, 3]]


def test_axial_attention_span_limit():
    layer = AxialAttention(4, 1, span=3)
    with pytest.raises(ConfigurationError):
        layer(Tensor(np.zeros((1, 4, 2, 5))), "width")
    layer(Tensor(np.zeros((1, 4, 5, 2))), "width")


def test_axial_attention_heads_must_divide_channels():
    with pytest.raises(ConfigurationError):
        AxialAttention(6, 4, span=4)


def test_axial_attention_bad_axis():
    layer = AxialAttention(4, 1, span=4)
    with pytest.raises(ConfigurationError):
        layer(Tensor(np.zeros((1, 4, 2, 2))), "depth")


class _Pair(Module):
    def __init__(self):
        self.a = Conv2d(1, 2, 3)
        self.bn = BatchNorm2d(2)
        self.layers = [Conv2d(2, 1, 1)]


def test_state_dict_names_and_round_trip():
    m = _Pair()
    names = list(m.state_dict())
    assert names == ["a.weight", "a.bias", "bn.gamma", "bn.beta", "layers.0.weight", "layers.0.bias",
                     "bn.running_mean", "bn.running_var"]
    other = _Pair()
    for p in other.parameters():
        p.data[...] = 7
    other.load_state_dict(m.state_dict())
    for name, value in m.state_dict().items():
        np.testing.assert_array_equal(other.state_dict()[name], value)


def test_load_state_dict_names_offending_parameter():
    m = _Pair()
    state = m.state_dict()
    state["layers.0.weight"] = np.zeros((3, 2, 1, 1), dtype=np.float32)
    with pytest.raises(DimensionError, match="layers.0.weight"):
        m.load_state_dict(state)
