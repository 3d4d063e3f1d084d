"""Differentiable network operators on (B, C, H, W) tensors."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor, as_tensor


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (B, M, Ho, Wo, K, K) view over the padded input
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation (no kernel flip).

    ``x`` is (B, M, H, W) and ``w`` is (N, M/groups, K, K). Groups are
    computed one after another with the same kernel, so a grouped call is
    bitwise equal to running each channel slice on its own.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    B, M, H, W = x.shape
    N, Mg, K, K2 = w.shape
    G = int(groups)
    if K != K2:
        raise ShapeError(f"conv2d: non-square kernel {w.shape}")
    if G < 1 or M % G or N % G:
        raise ShapeError(f"conv2d: channels (in={M}, out={N}) not divisible by groups={G}")
    if Mg != M // G:
        raise ShapeError(f"conv2d: weight {w.shape} does not match input {x.shape} with groups={G}")
    ho = conv_output_size(H, K, stride, pad)
    wo = conv_output_size(W, K, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: non-positive output size for input {x.shape}, K={K}, stride={stride}, pad={pad}")
    Ng = N // G
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = _windows(xp, K, stride, ho, wo)
    wd = w.data
    depthwise = Mg == 1 and Ng == 1

    if depthwise:
        out = np.einsum("bmhwpq,mpq->bmhw", win, wd[:, 0])
    elif K == 1 and stride == 1 and G == 1:
        out = np.tensordot(wd[:, :, 0, 0], x.data, axes=([1], [1])).transpose(1, 0, 2, 3)
    else:
        out = np.empty((B, N, ho, wo))
        for g in range(G):
            wg = wd[g * Ng:(g + 1) * Ng]
            xg = win[:, g * Mg:(g + 1) * Mg]
            res = np.tensordot(xg, wg, axes=([1, 4, 5], [1, 2, 3]))  # B, Ho, Wo, Ng
            out[:, g * Ng:(g + 1) * Ng] = res.transpose(0, 3, 1, 2)

    def backward(gout):
        gx = gw = None
        if w.requires_grad:
            if depthwise:
                gw = np.einsum("bmhw,bmhwpq->mpq", gout, win)[:, None]
            else:
                gw = np.empty_like(wd)
                for g in range(G):
                    go = gout[:, g * Ng:(g + 1) * Ng]
                    xg = win[:, g * Mg:(g + 1) * Mg]
                    gw[g * Ng:(g + 1) * Ng] = np.tensordot(go, xg, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            if depthwise:
                # (B, M, Ho, Wo, K, K)
                cols = gout[:, :, :, :, None, None] * wd[:, 0][None, :, None, None]
                for p in range(K):
                    for q in range(K):
                        gxp[:, :, p:p + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride] += cols[..., p, q]
            else:
                for g in range(G):
                    go = gout[:, g * Ng:(g + 1) * Ng]
                    wg = wd[g * Ng:(g + 1) * Ng]
                    cols = np.tensordot(go, wg, axes=([1], [0]))  # B, Ho, Wo, Mg, K, K
                    cols = cols.transpose(0, 3, 1, 2, 4, 5)
                    sl = slice(g * Mg, (g + 1) * Mg)
                    for p in range(K):
                        for q in range(K):
                            gxp[:, sl, p:p + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride] += cols[..., p, q]
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        return gx, gw

    return Tensor._make(out, (x, w), backward, "conv2d")


def shift_offsets(channels: int, kernel_size: int) -> np.ndarray:
    """Per-channel (dy, dx) displacement.

    Channels are split into K*K contiguous groups of ``channels // K**2``,
    assigned row-major over the offset grid; leftover channels stay at the
    centre offset (0, 0).
    """
    K = int(kernel_size)
    if K % 2 == 0 or K < 1:
        raise ValueError(f"shift kernel size must be odd, got {K}")
    half = K // 2
    per = channels // (K * K)
    offs = np.zeros((channels, 2), dtype=np.int64)
    for j in range(K * K):
        offs[j * per:(j + 1) * per] = (j // K - half, j % K - half)
    return offs


def _translate(data: np.ndarray, offsets: np.ndarray, sign: int) -> np.ndarray:
    # out[:, c, i, j] = data[:, c, i + dy, j + dx], zero outside
    out = np.zeros_like(data)
    H, W = data.shape[2:]
    for (ody, odx) in sorted({tuple(o) for o in offsets.tolist()}):
        chans = np.where((offsets[:, 0] == ody) & (offsets[:, 1] == odx))[0]
        dy, dx = sign * ody, sign * odx
        ys, ye = max(0, -dy), min(H, H - dy)
        xs, xe = max(0, -dx), min(W, W - dx)
        if ys >= ye or xs >= xe:
            continue
        out[:, chans, ys:ye, xs:xe] = data[:, chans, ys + dy:ye + dy, xs + dx:xe + dx]
    return out


def shift(x: Tensor, kernel_size: int = 3, reverse: bool = False) -> Tensor:
    """Zero-parameter channel-wise translation with zero fill.

    ``reverse`` negates every displacement. The backward pass is the
    reverse translation of the incoming gradient.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"shift expects a 4-D tensor, got {x.shape}")
    offs = shift_offsets(x.shape[1], kernel_size)
    sign = -1 if reverse else 1
    out = _translate(x.data, offs, sign)
    return Tensor._make(out, (x,), lambda g: (_translate(g, offs, -sign),), "shift")


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    """Reshape channels to (groups, C/groups), transpose, flatten."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    if groups < 1 or C % groups:
        raise ShapeError(f"channel_shuffle: {C} channels not divisible by groups={groups}")
    perm = np.arange(C).reshape(groups, C // groups).T.reshape(-1)
    inv = np.argsort(perm)
    return Tensor._make(x.data[:, perm], (x,), lambda g: (g[:, inv],), "channel_shuffle")


def global_avgpool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) spatial mean."""
    B, C, H, W = x.shape
    n = H * W

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / n, x.shape).copy(),)

    return Tensor._make(x.data.mean(axis=(2, 3)), (x,), backward, "global_avgpool")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 (odd trailing rows/cols dropped)."""
    B, C, H, W = x.shape
    h2, w2 = H // 2, W // 2
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"maxpool2: input {x.shape} too small")
    blocks = x.data[:, :, :2 * h2, :2 * w2].reshape(B, C, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, h2, w2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((B, C, h2, w2, 4))
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, C, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * h2, 2 * w2)
        gx = np.zeros(x.shape)
        gx[:, :, :2 * h2, :2 * w2] = gb
        return (gx,)

    return Tensor._make(out, (x,), backward, "maxpool2")


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, train: bool = True, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation.

    In train mode the batch statistics over (B, H, W) are used and the
    running buffers are updated in place by an exponential moving average
    (unbiased variance). Eval mode uses the running buffers.
    """
    if eps <= 0:
        raise ValueError("batchnorm2d: eps must be positive")
    x = as_tensor(x)
    B, C, H, W = x.shape
    n = B * H * W
    if n == 0:
        raise ShapeError("batchnorm2d: zero-size batch")
    g = gamma.data.reshape(1, C, 1, 1)
    b = beta.data.reshape(1, C, 1, 1)
    if train:
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(C)
        unbiased = var.reshape(C) * (n / (n - 1)) if n > 1 else var.reshape(C)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        inv = 1.0 / np.sqrt(running_var.reshape(1, C, 1, 1) + eps)
        xhat = (x.data - running_mean.reshape(1, C, 1, 1)) * inv
    out = g * xhat + b

    def backward(go):
        gg = (go * xhat).sum(axis=(0, 2, 3)).reshape(gamma.shape) if gamma.requires_grad else None
        gb = go.sum(axis=(0, 2, 3)).reshape(beta.shape) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = go * g
            if train:
                gx = inv / n * (n * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
            else:
                gx = dxhat * inv
        return gx, gg, gb

    return Tensor._make(out, (x, gamma, beta), backward, "batchnorm2d")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(B), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return (p * (g / B),)

    return Tensor._make(np.asarray(loss), (logits,), backward, "softmax_cross_entropy")


def linear(x: Tensor, w: Tensor, b: Tensor = None) -> Tensor:
    """x (B, in) @ w (in, out) + b."""
    from .tensor import matmul
    out = matmul(x, w)
    return out + b if b is not None else out
