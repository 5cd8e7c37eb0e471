"""Fused differentiable kernels: softmax family, layer norm, convolution."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, ParameterError
from .tensor import Tensor, as_tensor, make_result, sqrt, tsum


def _check_temperature(temperature):
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")


def softmax(x, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """softmax(x / temperature) along ``axis`` with max subtraction.

    The denominator is accumulated in float64.
    """
    _check_temperature(temperature)
    x = as_tensor(x)
    z = x.data / x.dtype.type(temperature)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)

    def backward(g):
        inner = np.sum(g * y, axis=axis, keepdims=True, dtype=np.float64).astype(y.dtype)
        return (y * (g - inner) / y.dtype.type(temperature),)

    return make_result("softmax", y, (x,), backward)


def log_softmax(x, temperature: float = 1.0, axis: int = -1) -> Tensor:
    _check_temperature(temperature)
    x = as_tensor(x)
    z = x.data / x.dtype.type(temperature)
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True, dtype=np.float64)).astype(x.dtype)
    out = z - lse
    y = np.exp(out)

    def backward(g):
        gs = np.sum(g, axis=axis, keepdims=True, dtype=np.float64).astype(y.dtype)
        return ((g - y * gs) / y.dtype.type(temperature),)

    return make_result("log_softmax", out, (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift.

    Moments are accumulated in float64; elementwise work stays in the input dtype.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm over {c} channels got gamma {gamma.shape}, beta {beta.shape}")
    if not eps > 0:
        raise ParameterError("layer_norm eps must be positive")
    dt = x.dtype
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64).astype(dt)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = xc * inv
    out = xhat * gamma.data.astype(dt) + beta.data.astype(dt)

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead, dtype=np.float64) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead, dtype=np.float64) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxh = g * gamma.data.astype(dt)
            m1 = gxh.mean(axis=-1, keepdims=True, dtype=np.float64).astype(dt)
            m2 = (gxh * xhat).mean(axis=-1, keepdims=True, dtype=np.float64).astype(dt)
            gx = inv * (gxh - m1 - xhat * m2)
        return gx, ggamma, gbeta

    return make_result("layer_norm", out, (x, gamma, beta), backward)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    norm = sqrt(tsum(x * x, axis=axis, keepdims=True) + eps)
    return x / norm


def _pair(v):
    return (v, v) if isinstance(v, (int, np.integer)) else tuple(v)


@lru_cache(maxsize=32)
def _tap_matrices(h: int, w: int, kh: int, kw: int, sh: int, sw: int, ph: int, pw: int) -> np.ndarray:
    """0/1 maps ``[kh*kw, Ho*Wo, H*W]``: tap (i, j) links output o to the input it reads."""
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    s = np.zeros((kh, kw, ho, wo, h, w), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            for a in range(ho):
                y = a * sh + i - ph
                if not 0 <= y < h:
                    continue
                for b in range(wo):
                    x = b * sw + j - pw
                    if 0 <= x < w:
                        s[i, j, a, b, y, x] = 1.0
    s = s.reshape(kh * kw, ho * wo * h * w)
    s.flags.writeable = False
    return s


# depthwise kernels on grids up to this many (output x input) positions use dense per-channel maps
_DENSE_DEPTHWISE_LIMIT = 65536


def conv2d(x, weight, bias=None, stride=1, padding=0, groups: int = 1) -> Tensor:
    """2-D cross-correlation over ``[C,H,W]`` or ``[N,C,H,W]`` inputs.

    ``weight`` has shape ``[C_out, C_in // groups, kh, kw]``. ``groups == C_in
    == C_out`` is depthwise convolution.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects [N,C,H,W] input and 4-d weight, got {x.shape}, {weight.shape}")
    n, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if groups < 1 or cin % groups or cout % groups or cg * groups != cin:
        raise DimensionError(f"groups={groups} incompatible with C_in={cin}, weight {weight.shape}")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1 or sh < 1 or sw < 1:
        raise DimensionError(f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")
    depthwise = groups == cin == cout and cg == 1
    dense = depthwise and ho * wo * h * w <= _DENSE_DEPTHWISE_LIMIT
    xp = None if dense else (np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data)
    hs, ws = slice(0, sh * (ho - 1) + 1, sh), slice(0, sw * (wo - 1) + 1, sw)

    def tap(arr, i, j):
        return arr[:, :, i + hs.start:i + hs.stop:sh, j + ws.start:j + ws.stop:sw]

    if dense:
        # out[c] = M[c] @ x[c] with M[c] = sum_taps w[c, tap] * S[tap]
        dt = np.result_type(x.dtype, weight.dtype)
        taps = _tap_matrices(h, w, kh, kw, sh, sw, ph, pw).astype(dt, copy=False)
        mix = (weight.data.reshape(cin, kh * kw).astype(dt) @ taps).reshape(cin, ho * wo, h * w)
        xt = np.ascontiguousarray(x.data.reshape(n, cin, h * w).transpose(1, 2, 0))
        out = np.matmul(mix, xt).transpose(2, 0, 1).reshape(n, cout, ho, wo)
    elif depthwise:
        wk = weight.data[:, 0]
        out = np.zeros((n, cout, ho, wo), dtype=np.result_type(x.dtype, weight.dtype))
        for i in range(kh):
            for j in range(kw):
                out += tap(xp, i, j) * wk[:, i, j][None, :, None, None]
    else:
        coutg = cout // groups
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        cols = (win.reshape(n, groups, cg, ho, wo, kh, kw)
                .transpose(1, 0, 3, 4, 2, 5, 6)
                .reshape(groups, n * ho * wo, cg * kh * kw))
        wt = weight.data.reshape(groups, coutg, cg * kh * kw).transpose(0, 2, 1)
        out = (np.matmul(cols, wt)
               .reshape(groups, n, ho, wo, coutg)
               .transpose(1, 0, 4, 2, 3)
               .reshape(n, cout, ho, wo))
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        gxp = np.zeros_like(xp) if x.requires_grad and not dense else None
        if dense:
            # strided operands send matmul down a slow non-BLAS loop
            gt = np.ascontiguousarray(g.reshape(n, cin, ho * wo).transpose(1, 2, 0))
            if weight.requires_grad:
                gmix = np.matmul(gt, xt.transpose(0, 2, 1)).reshape(cin, -1)
                gw = (gmix @ taps.T).reshape(weight.shape).astype(weight.dtype, copy=False)
            if x.requires_grad:
                gx = np.matmul(mix.transpose(0, 2, 1), gt).transpose(2, 0, 1).reshape(x.shape)
        elif depthwise:
            if weight.requires_grad:
                gw = np.zeros_like(weight.data)
            for i in range(kh):
                for j in range(kw):
                    if gxp is not None:
                        tap(gxp, i, j)[...] += g * wk[:, i, j][None, :, None, None]
                    if gw is not None:
                        gw[:, 0, i, j] = np.sum(g * tap(xp, i, j), axis=(0, 2, 3), dtype=np.float64)
        else:
            gm = g.reshape(n, groups, coutg, ho, wo).transpose(1, 0, 3, 4, 2).reshape(groups, n * ho * wo, coutg)
            if weight.requires_grad:
                gw = np.matmul(cols.transpose(0, 2, 1), gm).transpose(0, 2, 1).reshape(weight.shape)
            if gxp is not None:
                gc = (np.matmul(gm, wt.transpose(0, 2, 1))
                      .reshape(groups, n, ho, wo, cg, kh, kw)
                      .transpose(1, 0, 4, 5, 6, 2, 3)
                      .reshape(n, cin, kh, kw, ho, wo))
                for i in range(kh):
                    for j in range(kw):
                        tap(gxp, i, j)[...] += gc[:, :, i, j]
        if gxp is not None:
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    result = make_result("conv2d", out, inputs, backward)
    if squeeze:
        result = result.reshape(result.shape[1:])
    return result


def avg_pool2d(x, kernel_size: int = 3) -> Tensor:
    """Stride-1 same-size average pooling that ignores padded positions."""
    x = as_tensor(x)
    c = x.shape[-3]
    pad = kernel_size // 2
    ones_w = np.ones((c, 1, kernel_size, kernel_size), dtype=x.dtype)
    spatial = x.shape[-2:]
    counts = conv2d(np.ones((1, 1) + spatial, dtype=x.dtype),
                    np.ones((1, 1, kernel_size, kernel_size), dtype=x.dtype), padding=pad).data[0, 0]
    return conv2d(x, ones_w, padding=pad, groups=c) / counts
