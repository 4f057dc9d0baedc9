"""Layer kernels: dilated convolution, pooling, batch norm, bilinear resize,
and the two attention primitives (global scaled dot-product and
position-sensitive axial attention).

Functional kernels take and return :class:`Tensor`; the small ``Module``
classes below only hold parameters and call into them.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .errors import ConfigurationError, DimensionError, GeometryError
from .tensor import (
    Tensor,
    make_result,
    note_branch,
    matmul,
    mean,
    reshape,
    scale,
    softmax,
    take,
    transpose,
)


# ---------------------------------------------------------------------------
# module plumbing
# ---------------------------------------------------------------------------

class Parameter(Tensor):
    """A trainable leaf tensor. Its name is the dotted attribute path in the model."""

    def __init__(self, data, dtype=np.float32):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)


class Module:
    """Minimal parameter container with dotted-name traversal."""

    training = True
    _buffers: tuple = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for path, mod in self.modules():
            for name, value in vars(mod).items():
                if isinstance(value, Parameter):
                    yield (f"{path}.{name}" if path else name), value

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for path, mod in self.modules():
            for name in mod._buffers:
                yield (f"{path}.{name}" if path else name), getattr(mod, name)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[name] = buf
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        buffers = {name: (mod, attr) for path, mod in self.modules() for attr in mod._buffers
                   for name in [f"{path}.{attr}" if path else attr]}
        missing = (set(own) | set(buffers)) - set(state)
        unexpected = set(state) - set(own) - set(buffers)
        if missing or unexpected:
            raise DimensionError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, value in state.items():
            target = own[name].data if name in own else getattr(*buffers[name])
            if target.shape != tuple(value.shape):
                raise DimensionError(
                    f"parameter {name!r}: expected shape {target.shape}, got {tuple(value.shape)}")
        for name, value in state.items():
            if name in own:
                own[name].data[...] = value
            else:
                mod, attr = buffers[name]
                getattr(mod, attr)[...] = value

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True):
        for _, mod in self.modules():
            mod.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def to(self, dtype):
        """Cast parameters and buffers in place (used for float64 gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, mod in self.modules():
            for attr in mod._buffers:
                setattr(mod, attr, getattr(mod, attr).astype(dtype))
        return self


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding, stride and dilation (im2col + GEMM)."""
    B, C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    if Ci != C:
        raise DimensionError(f"conv2d: input has {C} channels, weight expects {Ci} (weight {weight.shape})")
    if dilation < 1 or stride < 1:
        raise GeometryError(f"conv2d: stride {stride} and dilation {dilation} must be >= 1")
    ext_h, ext_w = (kh - 1) * dilation + 1, (kw - 1) * dilation + 1
    if ext_h > H + 2 * padding or ext_w > W + 2 * padding:
        raise GeometryError(
            f"conv2d: kernel extent {ext_h}x{ext_w} exceeds padded input {H + 2 * padding}x{W + 2 * padding}")
    Ho = conv_output_size(H, kh, stride, padding, dilation)
    Wo = conv_output_size(W, kw, stride, padding, dilation)

    xd = x.data
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = xd.transpose(1, 0, 2, 3).reshape(C, -1)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        cols = np.empty((C, kh, kw, B, Ho, Wo), dtype=xd.dtype)
        xpt = xp.transpose(1, 0, 2, 3)
        for i in range(kh):
            r0 = i * dilation
            for j in range(kw):
                c0 = j * dilation
                cols[:, i, j] = xpt[:, :, r0:r0 + stride * (Ho - 1) + 1:stride, c0:c0 + stride * (Wo - 1) + 1:stride]
        cols = cols.reshape(C * kh * kw, -1)
    w2 = weight.data.reshape(O, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3))

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(O, -1)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad:
            dcols = w2.T @ g2
            if pointwise:
                gx = dcols.reshape(C, B, H, W).transpose(1, 0, 2, 3)
            else:
                dcols = dcols.reshape(C, kh, kw, B, Ho, Wo)
                dxp = np.zeros((C, B, H + 2 * padding, W + 2 * padding), dtype=xd.dtype)
                for i in range(kh):
                    r0 = i * dilation
                    for j in range(kw):
                        c0 = j * dilation
                        dxp[:, :, r0:r0 + stride * (Ho - 1) + 1:stride,
                            c0:c0 + stride * (Wo - 1) + 1:stride] += dcols[:, i, j]
                gx = dxp[:, :, padding:padding + H, padding:padding + W].transpose(1, 0, 2, 3)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, bw, "conv2d")


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    """Convolution layer. Only 1x1 and 3x3 kernels are used in this package."""

    zero_init = False

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: int | None = None, dilation: int = 1, bias: bool = True, rng=None):
        if kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd, got {kernel_size}")
        if dilation < 1:
            raise ConfigurationError(f"dilation must be >= 1, got {dilation}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (kernel_size // 2) if padding is None else padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


# ---------------------------------------------------------------------------
# normalization and pooling
# ---------------------------------------------------------------------------

class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        if not 0.0 < momentum < 1.0 or eps <= 0:
            raise ConfigurationError("BatchNorm2d needs momentum in (0,1) and eps > 0")
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self, self.training)


def batch_norm(x: Tensor, bn: BatchNorm2d, training: bool) -> Tensor:
    B, C, H, W = x.shape
    if C != bn.channels:
        raise DimensionError(f"batch_norm: input has {C} channels, layer has {bn.channels}")
    gamma, beta = bn.gamma, bn.beta
    dt = x.dtype.type
    shape = (1, C, 1, 1)
    if training:
        n = B * H * W
        if n < 2:
            raise GeometryError("batch_norm: training statistics need more than one value per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = bn.momentum
        bn.running_mean[...] = (1 - m) * bn.running_mean + m * mu
        # biased estimate: eval mode then reproduces train mode on a fixed batch
        bn.running_var[...] = (1 - m) * bn.running_var + m * var
    else:
        n = None
        mu = bn.running_mean.astype(x.dtype)
        var = bn.running_var.astype(x.dtype)
    invstd = (dt(1) / np.sqrt(var + dt(bn.eps))).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape)) * invstd.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def bw(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shape)
            if training:
                s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = invstd.reshape(shape) / dt(n) * (dt(n) * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * invstd.reshape(shape)
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), bw, "batch_norm")


def adaptive_avg_pool_1x1(x: Tensor) -> Tensor:
    """Per-channel spatial mean, shape (B, C, 1, 1)."""
    return mean(x, axis=(2, 3), keepdims=True)


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties send the gradient to the first
    maximum in row-major window order."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise GeometryError(f"max_pool2x2 needs even spatial dims, got {H}x{W}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = win.argmax(axis=-1)
    note_branch(arg)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((B, C, H // 2, W // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return make_result(out, (x,), bw, "max_pool2x2")


# ---------------------------------------------------------------------------
# bilinear resize (half-pixel centres, edge clamping)
# ---------------------------------------------------------------------------

def _resize_taps(n_in: int, n_out: int):
    d = np.arange(n_out, dtype=np.float64)
    s = np.clip((d + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1)
    i0 = np.floor(s).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, s - i0


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    i0, i1, f = _resize_taps(n_in, n_out)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - f)
    np.add.at(m, (rows, i1), f)
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize with source coordinate ``(d + 0.5) * in/out - 0.5`` clamped to
    the valid range. Blends are written as ``a + f * (b - a)`` so constant
    regions stay exactly constant."""
    if out_h < 1 or out_w < 1:
        raise GeometryError(f"bilinear_resize: output size {out_h}x{out_w} must be positive")
    B, C, H, W = x.shape
    if (H, W) == (out_h, out_w):
        return make_result(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")
    dt = x.dtype
    y = x.data
    if out_h != H:
        i0, i1, f = _resize_taps(H, out_h)
        a = y[:, :, i0, :]
        y = a + f.astype(dt)[:, None] * (y[:, :, i1, :] - a)
    if out_w != W:
        i0, i1, f = _resize_taps(W, out_w)
        a = y[:, :, :, i0]
        y = a + f.astype(dt) * (y[:, :, :, i1] - a)
    rh = _resize_matrix(H, out_h, dt)
    rw = _resize_matrix(W, out_w, dt)

    def bw(g):
        return (rh.T @ g @ rw,)

    return make_result(np.ascontiguousarray(y), (x,), bw, "bilinear_resize")


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

class AttentionProjection(Module):
    """Query/key/value projections. Each matrix is (d_model, heads * d_k);
    head h owns columns ``h*d_k:(h+1)*d_k``."""

    def __init__(self, d_model: int, heads: int = 1, rng=None):
        if heads < 1 or d_model % heads:
            raise ConfigurationError(f"d_model {d_model} must be divisible by heads {heads}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_model = d_model
        self.heads = heads
        self.d_k = d_model // heads
        std = 1.0 / math.sqrt(d_model)
        self.w_q = Parameter(rng.standard_normal((d_model, d_model)) * std)
        self.w_k = Parameter(rng.standard_normal((d_model, d_model)) * std)
        self.w_v = Parameter(rng.standard_normal((d_model, d_model)) * std)


def self_attention(x: Tensor, proj: AttentionProjection, scaled: bool = True) -> Tensor:
    """Single-head ``softmax(Q K^T / sqrt(d_k)) V`` over the rows of an (N, d_model) matrix.

    ``scaled=False`` drops the ``1/sqrt(d_k)`` factor.
    """
    if x.ndim != 2 or x.shape[1] != proj.d_model:
        raise DimensionError(f"self_attention: expected (N, {proj.d_model}) tokens, got {x.shape}")
    q = matmul(x, proj.w_q)
    k = matmul(x, proj.w_k)
    v = matmul(x, proj.w_v)
    scores = matmul(q, transpose(k, (1, 0)))
    if scaled:
        scores = scale(scores, 1.0 / math.sqrt(q.shape[1]))
    return matmul(softmax(scores, axis=-1), v)


class AxialAttention(Module):
    """Multi-head position-sensitive attention along one spatial axis.

    The relative-position tables are indexed by ``w - j + span - 1`` for
    query position ``j`` and key position ``w``, and shared across the other
    spatial axis.
    """

    def __init__(self, channels: int, heads: int = 4, span: int = 64, rng=None):
        if heads < 1 or channels % heads:
            raise ConfigurationError(f"channels {channels} must be divisible by heads {heads}")
        if span < 1:
            raise ConfigurationError(f"span must be >= 1, got {span}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.heads = heads
        self.span = span
        self.proj = AttentionProjection(channels, heads, rng)
        d_k = channels // heads
        self.rel_q = Parameter(rng.standard_normal((heads, 2 * span - 1, d_k)) * 0.02)
        self.rel_k = Parameter(rng.standard_normal((heads, 2 * span - 1, d_k)) * 0.02)
        self.rel_v = Parameter(rng.standard_normal((heads, 2 * span - 1, d_k)) * 0.02)

    def forward(self, x: Tensor, axis: str = "width") -> Tensor:
        return axial_attention(x, self, axis)


def relative_index(length: int, span: int) -> np.ndarray:
    j = np.arange(length)
    return j[None, :] - j[:, None] + span - 1


def axial_attention(x: Tensor, layer: AxialAttention, axis: str = "width") -> Tensor:
    """Position-sensitive attention along ``axis`` ("width" or "height").

    For the width axis, with all quantities per head::

        y_ij = sum_w softmax_w(q_ij.k_iw + q_ij.rq[w-j] + k_iw.rk[w-j]) (v_iw + rv[w-j])

    Scores are not scaled by ``1/sqrt(d_k)``.
    """
    if axis == "height":
        return transpose(_width_attention(transpose(x, (0, 1, 3, 2)), layer), (0, 1, 3, 2))
    if axis != "width":
        raise ConfigurationError(f"axis must be 'height' or 'width', got {axis!r}")
    return _width_attention(x, layer)


def _width_attention(x: Tensor, layer: AxialAttention) -> Tensor:
    B, C, H, L = x.shape
    if C != layer.channels:
        raise DimensionError(f"axial_attention: input has {C} channels, layer has {layer.channels}")
    if L > layer.span:
        raise ConfigurationError(f"axial_attention: axis length {L} exceeds span {layer.span}")
    n, dk = layer.heads, C // layer.heads
    p = layer.proj

    tokens = transpose(x, (0, 2, 3, 1))  # B, H, L, C

    def heads_of(w):
        t = reshape(matmul(tokens, w), (B, H, L, n, dk))
        return transpose(t, (0, 3, 1, 2, 4))  # B, n, H, L, dk

    q, k, v = heads_of(p.w_q), heads_of(p.w_k), heads_of(p.w_v)
    idx = relative_index(L, layer.span)
    rq = take(layer.rel_q, idx, axis=1)  # n, L(j), L(w), dk
    rk = take(layer.rel_k, idx, axis=1)
    rv = take(layer.rel_v, idx, axis=1)

    # relative terms as matmuls batched over (head, attended position)
    bh = B * H
    q_by_j = reshape(transpose(q, (1, 3, 0, 2, 4)), (n, L, bh, dk))
    k_by_w = reshape(transpose(k, (1, 3, 0, 2, 4)), (n, L, bh, dk))
    q_rel = matmul(q_by_j, transpose(rq, (0, 1, 3, 2)))  # n, j, bh, w
    k_rel = matmul(k_by_w, transpose(rk, (0, 2, 3, 1)))  # n, w, bh, j

    logits = matmul(q, transpose(k, (0, 1, 2, 4, 3)))
    logits = logits + transpose(reshape(q_rel, (n, L, B, H, L)), (2, 0, 3, 1, 4))
    logits = logits + transpose(reshape(k_rel, (n, L, B, H, L)), (2, 0, 3, 4, 1))
    attn = softmax(logits, axis=-1)
    a_by_j = reshape(transpose(attn, (1, 3, 0, 2, 4)), (n, L, bh, L))
    v_rel = transpose(reshape(matmul(a_by_j, rv), (n, L, B, H, dk)), (2, 0, 3, 1, 4))
    y = matmul(attn, v) + v_rel
    y = transpose(y, (0, 1, 4, 2, 3))  # B, n, dk, H, L
    return reshape(y, (B, C, H, L))
