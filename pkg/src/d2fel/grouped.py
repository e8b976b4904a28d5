"""Run all heads of an ensemble side by side as one wide network.

When every head clones the same number of bottlenecks, layer ``j`` of all
``G`` heads can be evaluated together: activations are laid out as
``[B, G*C, H, W]`` so batch norm and ReLU act on the stacked channels
unchanged, convolutions become grouped convolutions, and the first head
block, whose input is shared, becomes one ordinary convolution with
``G*O`` filters.  Parameters stay in the per-head modules; they are
stacked for each pass and gradients are split back afterwards.  The
result matches running the heads one by one up to float rounding.
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

from .inpattern import BottleneckBlock
from .ndcore import (StateError, batch_norm_backward, batch_norm_forward, instance_norm_backward,
                     instance_norm_forward)


# ---------------------------------------------------------------------------
# grouped convolution
# ---------------------------------------------------------------------------

def grouped_conv_forward(x, weights, shared: bool, stride: int = 1, padding: int = 0):
    """``weights``: ``[G, O, C, K, K]``.  ``x`` is ``[B, C, H, W]`` if ``shared`` else ``[B, G*C, H, W]``."""
    G, O, C, K, _ = weights.shape
    B, _, H, W = x.shape
    Gx = 1 if shared else G
    xg = x.reshape(B, Gx, C, H, W).transpose(1, 0, 3, 4, 2)           # [Gx, B, H, W, C]
    Ho = (H + 2 * padding - K) // stride + 1
    Wo = (W + 2 * padding - K) // stride + 1
    N = B * Ho * Wo
    if K == 1 and padding == 0:
        cols = np.ascontiguousarray(xg[:, :, ::stride, ::stride]).reshape(Gx, N, C)
    else:
        xp = np.zeros((Gx, B, H + 2 * padding, W + 2 * padding, C), dtype=x.dtype)
        xp[:, :, padding:padding + H, padding:padding + W] = xg
        cols = np.empty((Gx, B, Ho, Wo, K, K, C), dtype=x.dtype)
        for ki in range(K):
            for kj in range(K):
                cols[:, :, :, :, ki, kj] = xp[:, :, ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride]
        cols = cols.reshape(Gx, N, K * K * C)
    wmat = weights.transpose(0, 3, 4, 2, 1).reshape(G, K * K * C, O)     # [G, KKC, O]
    if shared:
        out = cols[0] @ wmat.transpose(1, 0, 2).reshape(K * K * C, G * O)
        out = out.reshape(B, Ho, Wo, G * O).transpose(0, 3, 1, 2)
    else:
        out = np.matmul(cols, wmat).reshape(G, B, Ho, Wo, O).transpose(1, 0, 4, 2, 3)
        out = out.reshape(B, G * O, Ho, Wo)
    return np.ascontiguousarray(out), (x.shape, cols, wmat, weights.shape, shared, stride, padding)


def grouped_conv_backward(dout, cache):
    x_shape, cols, wmat, w_shape, shared, stride, padding = cache
    G, O, C, K, _ = w_shape
    B, _, H, W = x_shape
    _, _, Ho, Wo = dout.shape
    N = B * Ho * Wo
    KKC = K * K * C
    if shared:
        d2 = dout.transpose(0, 2, 3, 1).reshape(N, G * O)
        dw = (cols[0].T @ d2).reshape(KKC, G, O).transpose(1, 0, 2)
        dcols = (d2 @ wmat.transpose(1, 0, 2).reshape(KKC, G * O).T).reshape(1, N, KKC)
    else:
        d2 = dout.reshape(B, G, O, Ho, Wo).transpose(1, 0, 3, 4, 2).reshape(G, N, O)
        dw = np.matmul(cols.transpose(0, 2, 1), d2)
        dcols = np.matmul(d2, wmat.transpose(0, 2, 1))
    dweights = dw.reshape(G, K, K, C, O).transpose(0, 4, 3, 1, 2)
    Gx = dcols.shape[0]
    if K == 1 and padding == 0:
        dxs = dcols.reshape(Gx, B, Ho, Wo, C)
        if stride > 1:
            dxh = np.zeros((Gx, B, H, W, C), dtype=dcols.dtype)
            dxh[:, :, ::stride, ::stride] = dxs
        else:
            dxh = dxs
    else:
        dcols = dcols.reshape(Gx, B, Ho, Wo, K, K, C)
        dxh = np.zeros((Gx, B, H + 2 * padding, W + 2 * padding, C), dtype=dcols.dtype)
        for ki in range(K):
            for kj in range(K):
                dxh[:, :, ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride] += dcols[:, :, :, :, ki, kj]
        dxh = dxh[:, :, padding:padding + H, padding:padding + W]
    dx = dxh.transpose(1, 0, 4, 2, 3).reshape(B, Gx * C, H, W)
    return np.ascontiguousarray(dx), np.ascontiguousarray(dweights)


# ---------------------------------------------------------------------------
# stacked layers
# ---------------------------------------------------------------------------

class _StackedConv:
    def __init__(self, convs, shared: bool):
        self.convs, self.shared = convs, shared
        self.stride, self.padding = convs[0].stride, convs[0].padding

    def forward(self, x):
        w = np.stack([c.params["weight"].data for c in self.convs])
        out, self.cache = grouped_conv_forward(x, w, self.shared, self.stride, self.padding)
        return out

    def backward(self, dout):
        dx, dw = grouped_conv_backward(dout, self.cache)
        for c, g in zip(self.convs, dw):
            c.params["weight"].grad += g
        return dx


class _StackedBN:
    def __init__(self, bns, training: bool):
        self.bns, self.training = bns, training

    def forward(self, x):
        bns = self.bns
        if not self.training and any(b.buffers["num_batches"].data[0] == 0 for b in bns):
            raise StateError("batch_norm: eval mode requires populated running statistics")
        gamma = np.concatenate([b.params["weight"].data for b in bns])
        beta = np.concatenate([b.params["bias"].data for b in bns])
        rm = np.concatenate([b.buffers["running_mean"].data for b in bns])
        rv = np.concatenate([b.buffers["running_var"].data for b in bns])
        out, self.cache = batch_norm_forward(x, gamma, beta, rm, rv, self.training, bns[0].momentum, bns[0].eps)
        if self.training:
            C = len(rm) // len(bns)
            for k, b in enumerate(bns):
                b.buffers["running_mean"].data[:] = rm[k * C:(k + 1) * C]
                b.buffers["running_var"].data[:] = rv[k * C:(k + 1) * C]
                b.buffers["num_batches"].data[0] += 1
        return out

    def backward(self, dout):
        dx, dg, db = batch_norm_backward(dout, self.cache)
        C = len(dg) // len(self.bns)
        for k, b in enumerate(self.bns):
            b.params["weight"].grad += dg[k * C:(k + 1) * C]
            b.params["bias"].grad += db[k * C:(k + 1) * C]
        return dx


def _relu(x):
    mask = x > 0
    return x * mask, mask


class _StackedBlock:
    """Position ``j`` of every head, evaluated as one wide bottleneck."""

    def __init__(self, blocks: Sequence[BottleneckBlock], shared: bool, training: bool):
        b0 = blocks[0]
        self.G, self.shared = len(blocks), shared
        self.in_ch, self.out_ch = b0.in_ch, b0.out_ch
        self.downsample = b0.downsample
        self.in_position = b0.in_position
        self.eps = b0.inorm.eps
        self.conv1 = _StackedConv([b.conv1 for b in blocks], shared)
        self.bn1 = _StackedBN([b.bn1 for b in blocks], training)
        self.conv2 = _StackedConv([b.conv2 for b in blocks], False)
        self.bn2 = _StackedBN([b.bn2 for b in blocks], training)
        self.conv3 = _StackedConv([b.conv3 for b in blocks], False)
        self.bn3 = _StackedBN([b.bn3 for b in blocks], training)
        if self.downsample:
            self.conv_d = _StackedConv([b.conv_d for b in blocks], shared)
            self.bn_d = _StackedBN([b.bn_d for b in blocks], training)
        flags = np.array([b.apply_in for b in blocks])
        self.in_channels = np.flatnonzero(np.repeat(flags, self.out_ch))
        self.all_in = bool(flags.all())

    def _in_forward(self, s):
        if len(self.in_channels) == 0:
            return s, None
        if self.all_in:
            return instance_norm_forward(s, self.eps)
        s = s.copy()
        sub, cache = instance_norm_forward(s[:, self.in_channels], self.eps)
        s[:, self.in_channels] = sub
        return s, cache

    def _in_backward(self, d, cache):
        if cache is None:
            return d
        if self.all_in:
            return instance_norm_backward(d, cache)
        d = d.copy()
        d[:, self.in_channels] = instance_norm_backward(d[:, self.in_channels], cache)
        return d

    def forward(self, x):
        out, self.m1 = _relu(self.bn1.forward(self.conv1.forward(x)))
        out, self.m2 = _relu(self.bn2.forward(self.conv2.forward(out)))
        out = self.bn3.forward(self.conv3.forward(out))
        if self.downsample:
            short = self.bn_d.forward(self.conv_d.forward(x))
        elif self.shared:
            short = np.tile(x, (1, self.G, 1, 1))
        else:
            short = x
        s = out + short
        self.in_cache = None
        if self.in_position == "pre_relu":
            s, self.in_cache = self._in_forward(s)
        y, self.m_out = _relu(s)
        if self.in_position == "post_relu":
            y, self.in_cache = self._in_forward(y)
        return y

    def backward(self, dy):
        if self.in_position == "post_relu":
            dy = self._in_backward(dy, self.in_cache)
        ds = dy * self.m_out
        if self.in_position == "pre_relu":
            ds = self._in_backward(ds, self.in_cache)
        d = self.conv3.backward(self.bn3.backward(ds))
        d = self.conv2.backward(self.bn2.backward(d * self.m2))
        dx = self.conv1.backward(self.bn1.backward(d * self.m1))
        if self.downsample:
            dx = dx + self.conv_d.backward(self.bn_d.backward(ds))
        elif self.shared:
            B, _, H, W = ds.shape
            dx = dx + ds.reshape(B, self.G, -1, H, W).sum(axis=1)
        else:
            dx = dx + ds
        return dx


class GroupedHeads:
    """Forward/backward of ``G`` equal-depth heads on a shared trunk output."""

    def __init__(self, heads, training: bool):
        self.G = len(heads)
        depth = len(heads[0].blocks)
        self.blocks = [_StackedBlock([h.blocks[j] for h in heads], j == 0, training) for j in range(depth)]

    def forward(self, x) -> List[np.ndarray]:
        for block in self.blocks:
            x = block.forward(x)
        B, GC, H, W = x.shape
        self.shape = x.shape
        pooled = x.reshape(B, GC, H * W).mean(axis=2)
        F = GC // self.G
        return [pooled[:, k * F:(k + 1) * F] for k in range(self.G)]

    def backward(self, dfeats: Sequence[Optional[np.ndarray]]) -> np.ndarray:
        B, GC, H, W = self.shape
        F = GC // self.G
        dtype = next((df.dtype for df in dfeats if df is not None), np.float32)
        dpool = np.zeros((B, GC), dtype=dtype)
        for k, df in enumerate(dfeats):
            if df is not None:
                dpool[:, k * F:(k + 1) * F] = df
        d = np.broadcast_to((dpool / (H * W))[:, :, None, None], self.shape).astype(dpool.dtype)
        for block in reversed(self.blocks):
            d = block.backward(d)
        return d
