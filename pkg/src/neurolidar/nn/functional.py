"""Convolution, pooling and dense layers (NCHW) built on im2col + BLAS matmul."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _nhwc(a):
    """Channels-last view of a logical (N, C, H, W) array (free when already NHWC-strided)."""
    return a.transpose(0, 2, 3, 1)


def _nchw(a):
    return a.transpose(0, 3, 1, 2)


def _im2col(xh, kh, kw, stride, padding):
    """Channels-last (N, H, W, C) -> (N*Ho*Wo, kh*kw*C) patch matrix plus (Ho, Wo)."""
    n, h, w, c = xh.shape
    if kh == kw == 1 and stride == 1 and padding == 0:
        return np.ascontiguousarray(xh).reshape(n * h * w, c), h, w
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho = (xh.shape[1] - kh) // stride + 1
    wo = (xh.shape[2] - kw) // stride + 1
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xh.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xh[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c), ho, wo


def _col2im(cols, shape, kh, kw, stride, padding, ho, wo):
    """Adjoint of :func:`_im2col`; returns channels-last (N, H, W, C)."""
    n, h, w, c = shape
    if kh == kw == 1 and stride == 1 and padding == 0:
        return cols.reshape(n, h, w, c)
    cols = cols.reshape(n, ho, wo, kh, kw, c)
    out = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += cols[:, :, :, i, j, :]
    if padding:
        out = out[:, padding:padding + h, padding:padding + w, :]
    return out


def _check_conv(x, weight, groups, transposed=False):
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv expects 4-D input and weight, got {x.shape} and {weight.shape}")
    cin = weight.shape[0] if transposed else weight.shape[1] * groups
    if x.shape[1] != cin:
        raise ValueError(f"input shape {x.shape} does not match weight shape {weight.shape}")
    if x.shape[1] % groups:
        raise ValueError(f"{x.shape[1]} channels not divisible into {groups} groups")


def _wmat(w):
    # (O, C, kh, kw) -> (kh*kw*C, O), matching the patch column order
    o = w.shape[0]
    return w.transpose(2, 3, 1, 0).reshape(-1, o)


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Cross-correlation. weight: (O, C/groups, kh, kw); bias: (O,) or None.

    Outputs are logical (N, O, Ho, Wo) arrays backed by channels-last memory.
    """
    _check_conv(x, weight, groups)
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"kernel {weight.shape} larger than padded input {x.shape}")
    og = o // groups
    xh = _nhwc(x.data)
    cache, parts = [], []
    for gi in range(groups):
        xg = xh if groups == 1 else xh[..., gi * cg:(gi + 1) * cg]
        cols, ho, wo = _im2col(xg, kh, kw, stride, padding)
        parts.append(cols @ _wmat(weight.data[gi * og:(gi + 1) * og]))
        cache.append(cols)
    res = parts[0] if groups == 1 else np.concatenate(parts, axis=1)
    if bias is not None:
        res += bias.data

    def bw(g):
        gm = np.ascontiguousarray(_nhwc(g)).reshape(-1, o)
        dw = np.empty_like(weight.data)
        dx = np.empty((n, h, w, c), dtype=g.dtype) if x.requires_grad else None
        for gi in range(groups):
            gg = gm if groups == 1 else gm[:, gi * og:(gi + 1) * og]
            dw[gi * og:(gi + 1) * og] = (gg.T @ cache[gi]).reshape(og, kh, kw, cg) \
                .transpose(0, 3, 1, 2)
            if dx is not None:
                dcol = gg @ _wmat(weight.data[gi * og:(gi + 1) * og]).T
                dx[..., gi * cg:(gi + 1) * cg] = _col2im(dcol, (n, h, w, cg), kh, kw, stride,
                                                         padding, ho, wo)
        dx = None if dx is None else _nchw(dx)
        if bias is None:
            return dx, dw
        return dx, dw, gm.sum(axis=0)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make(_nchw(res.reshape(n, ho, wo, o)), parents, bw)


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0):
    """Adjoint of conv2d. weight: (Cin, Cout, kh, kw); output size (H-1)*s - 2p + k."""
    _check_conv(x, weight, 1, transposed=True)
    n, cin, h, w = x.shape
    _, cout, kh, kw = weight.shape
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho <= 0 or wo <= 0:
        raise ValueError(f"transposed conv of {x.shape} with {weight.shape} is empty")
    xm = np.ascontiguousarray(_nhwc(x.data)).reshape(-1, cin)
    wm = weight.data.transpose(0, 2, 3, 1).reshape(cin, -1)
    out = _col2im(xm @ wm, (n, ho, wo, cout), kh, kw, stride, padding, h, w)
    if bias is not None:
        out += bias.data

    def bw(g):
        gcols, _, _ = _im2col(_nhwc(g), kh, kw, stride, padding)
        dx = _nchw((gcols @ wm.T).reshape(n, h, w, cin)) if x.requires_grad else None
        dw = (xm.T @ gcols).reshape(cin, kh, kw, cout).transpose(0, 3, 1, 2)
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make(_nchw(out), parents, bw)


def maxpool2d(x, window=2):
    """Non-overlapping max pooling; ties send the gradient to the first maximum."""
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ValueError(f"input {x.shape} not divisible by pooling window {window}")
    ho, wo = h // window, w // window
    k = window
    blocks = np.ascontiguousarray(_nhwc(x.data)).reshape(n, ho, k, wo, k, c) \
        .transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        d = np.zeros_like(blocks)
        np.put_along_axis(d, arg[..., None], np.ascontiguousarray(_nhwc(g))[..., None], axis=-1)
        d = d.reshape(n, ho, wo, c, k, k).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (_nchw(d),)

    return make(_nchw(out), (x,), bw)


def _box_sum(a, k):
    """Valid-mode k x k window sums over the last two axes via integral images."""
    s = np.cumsum(np.cumsum(a, axis=-2), axis=-1)
    s = np.pad(s, [(0, 0)] * (a.ndim - 2) + [(1, 0), (1, 0)])
    return s[..., k:, k:] - s[..., :-k, k:] - s[..., k:, :-k] + s[..., :-k, :-k]


def box_mean(x, k):
    """Mean over every k x k window (stride 1, no padding)."""
    h, w = x.shape[-2:]
    if h < k or w < k:
        raise ValueError(f"window {k} larger than input {x.shape}")
    inv = 1.0 / (k * k)
    out = (_box_sum(x.data, k) * inv).astype(x.dtype)

    def bw(g):
        pad = [(0, 0)] * (g.ndim - 2) + [(k - 1, k - 1), (k - 1, k - 1)]
        return ((_box_sum(np.pad(g, pad), k) * inv).astype(x.dtype),)

    return make(out, (x,), bw)


def global_avg_pool(x):
    """(N, C, H, W) -> (N, C)."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return make(out, (x,),
                lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


def linear(x, weight, bias=None):
    """(N, F) @ weight(O, F).T + bias(O,)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        dx = g @ weight.data
        dw = g.T @ x.data
        return (dx, dw, g.sum(axis=0)) if bias is not None else (dx, dw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make(out, parents, bw)


def as_input(arr, dtype=np.float32):
    return Tensor(np.ascontiguousarray(arr, dtype=dtype))
