"""Layer primitives with explicit forward/backward passes.

Every forward function returns ``(out, cache)`` and the matching backward
function consumes ``(dout, cache)``. Arrays are float64.

The public ``conv2d_*`` / ``batchnorm2d_*`` functions take NCHW tensors. The
network itself runs on the channel-major ``*_cnhw`` variants, which avoid a
transpose per layer (matmul output lands directly in CNHW order).
"""

from __future__ import annotations

import numpy as np

from gslab.errors import DegenerateVarianceError, DimensionError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _check_conv(c, h, w, weight, bias, stride, pad):
    if weight.ndim != 4:
        raise DimensionError(f"conv weight must be (O, I, kh, kw), got {weight.shape}")
    o, i, kh, kw = weight.shape
    if c != i:
        raise DimensionError(f"input has {c} channels but weight expects {i}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"bias shape {bias.shape} does not match {o} output channels")
    if stride < 1 or pad < 0:
        raise DimensionError("stride must be >= 1 and pad >= 0")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise DimensionError(f"kernel {kh}x{kw} does not fit padded input {h + 2 * pad}x{w + 2 * pad}")


def conv2d_cnhw_forward(x, weight, bias, stride=1, pad=0):
    """Cross-correlation on a (C, N, H, W) tensor via an unrolled column matrix."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects a 4-d input, got {x.shape}")
    c, n, h, w = x.shape
    _check_conv(c, h, w, weight, bias, stride, pad)
    o, _, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    # cols[c, i, j, n, y, x] = xp[c, n, stride*y + i, stride*x + j]
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    out = weight.reshape(o, -1) @ cols
    if bias is not None:
        out += bias[:, None]
    cache = ((c, n, h, w), cols, weight, stride, pad, bias is not None)
    return out.reshape(o, n, ho, wo), cache


def conv2d_cnhw_backward(dout, cache):
    (c, n, h, w), cols, weight, stride, pad, has_bias = cache
    o, _, kh, kw = weight.shape
    _, _, ho, wo = dout.shape

    dflat = dout.reshape(o, -1)
    dweight = (dflat @ cols.T).reshape(weight.shape)
    dbias = dflat.sum(axis=1) if has_bias else None

    dcols = (weight.reshape(o, -1).T @ dflat).reshape(c, kh, kw, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    return dx, dweight, dbias


def conv2d_forward(x, weight, bias, stride=1, pad=0):
    """NCHW convolution: output spatial size ``(H + 2*pad - k)//stride + 1``."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input, got {x.shape}")
    out, cache = conv2d_cnhw_forward(x.transpose(1, 0, 2, 3), weight, bias, stride, pad)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3)), cache


def conv2d_backward(dout, cache):
    dx, dweight, dbias = conv2d_cnhw_backward(np.ascontiguousarray(dout.transpose(1, 0, 2, 3)), cache)
    return np.ascontiguousarray(dx.transpose(1, 0, 2, 3)), dweight, dbias


def batchnorm_cnhw_forward(x, gamma, beta, running_mean, running_var, train, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch norm on (C, N, H, W); statistics over (N, H, W).

    Train mode updates ``running_mean``/``running_var`` in place (unbiased
    variance for the running estimate). Eval mode only reads them.
    """
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch-norm parameters must have shape ({c},)")
    if train:
        count = x[0].size
        if count < 2:
            raise DegenerateVarianceError("train-mode batch norm needs more than one value per channel")
        mean = x.mean(axis=(1, 2, 3))
        var = x.var(axis=(1, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None, None, None]) * inv_std[:, None, None, None]
    out = gamma[:, None, None, None] * xhat + beta[:, None, None, None]
    return out, (xhat, gamma, inv_std, train)


def batchnorm_cnhw_backward(dout, cache):
    xhat, gamma, inv_std, train = cache
    dgamma = (dout * xhat).sum(axis=(1, 2, 3))
    dbeta = dout.sum(axis=(1, 2, 3))
    dxhat = dout * gamma[:, None, None, None]
    if not train:
        return dxhat * inv_std[:, None, None, None], dgamma, dbeta
    mean_dxhat = dxhat.mean(axis=(1, 2, 3), keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=(1, 2, 3), keepdims=True)
    dx = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_std[:, None, None, None]
    return dx, dgamma, dbeta


def batchnorm2d_forward(x, gamma, beta, running_mean, running_var, train, momentum=BN_MOMENTUM, eps=BN_EPS):
    if x.ndim != 4:
        raise DimensionError(f"batch norm expects NCHW input, got {x.shape}")
    out, cache = batchnorm_cnhw_forward(x.transpose(1, 0, 2, 3), gamma, beta, running_mean, running_var,
                                        train, momentum, eps)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3)), cache


def batchnorm2d_backward(dout, cache):
    dx, dgamma, dbeta = batchnorm_cnhw_backward(dout.transpose(1, 0, 2, 3), cache)
    return np.ascontiguousarray(dx.transpose(1, 0, 2, 3)), dgamma, dbeta


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def linear_forward(x, weight, bias):
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear layer expects (N, {weight.shape[0]}) input, got {x.shape}")
    return x @ weight + bias, x


def linear_backward(dout, x, weight):
    return dout @ weight.T, x.T @ dout, dout.sum(axis=0)


def global_avg_pool_cnhw_forward(x):
    """(C, N, H, W) -> (N, C)."""
    return x.mean(axis=(2, 3)).T, x.shape


def global_avg_pool_cnhw_backward(dout, shape):
    c, n, h, w = shape
    return np.broadcast_to((dout.T / (h * w))[:, :, None, None], shape).copy()
