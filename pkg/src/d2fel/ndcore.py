"""Dense numpy layer primitives with hand-written backward passes.

Every layer caches what it needs during ``forward`` and consumes the cache
in ``backward``.  Parameters are :class:`Tensor` objects that carry their
own gradient buffer; activations flowing between layers are plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

DEFAULT_EPS = 1e-5


class DimensionError(ValueError):
    """Raised when array shapes are incompatible with an operation."""


class StateError(RuntimeError):
    """Raised when a layer is used in a state it does not support."""


class NumericError(FloatingPointError):
    """Raised when a non-finite value appears in an activation or gradient."""


class Tensor:
    """A named parameter or buffer: dense array plus optional gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = True):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad = np.zeros_like(self.data)

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        if self.grad is not None:
            self.grad = self.grad.astype(dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


def check_finite(array: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise NumericError(f"non-finite values in {what}")
    return array


def _expect_ndim(x: np.ndarray, ndim: int, op: str) -> None:
    if x.ndim != ndim:
        raise DimensionError(f"{op}: expected {ndim}-d input, got shape {x.shape}")


# ---------------------------------------------------------------------------
# functional forms
# ---------------------------------------------------------------------------

def conv2d_output_hw(h: int, w: int, k: int, stride: int, padding: int) -> Tuple[int, int]:
    return (h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1


def conv2d_reference(x, weight, bias=None, stride=1, padding=0):
    """Direct nested-loop convolution (cross-correlation); slow, used as an oracle."""
    B, C, H, W = x.shape
    O, Ck, K, _ = weight.shape
    if Ck != C:
        raise DimensionError(f"conv2d: input {x.shape} vs kernel {weight.shape}")
    Ho, Wo = conv2d_output_hw(H, W, K, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((B, O, Ho, Wo), dtype=np.result_type(x, weight))
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for ki in range(K):
                            for kj in range(K):
                                acc += xp[b, c, i * stride + ki, j * stride + kj] * weight[o, c, ki, kj]
                    out[b, o, i, j] = acc + (0.0 if bias is None else bias[o])
    return out


def conv2d_forward(x, weight, bias, stride: int = 1, padding: int = 0):
    _expect_ndim(x, 4, "conv2d")
    B, C, H, W = x.shape
    O, Ck, K, K2 = weight.shape
    if Ck != C or K != K2:
        raise DimensionError(f"conv2d: input {x.shape} vs kernel {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    Ho, Wo = conv2d_output_hw(H, W, K, stride, padding)
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: kernel {weight.shape} too large for input {x.shape}")
    # columns are gathered channels-last: [B, Ho, Wo, K, K, C]
    wmat = weight.transpose(0, 2, 3, 1).reshape(O, -1)
    xh = x.transpose(0, 2, 3, 1)
    if K == 1 and padding == 0:
        cols = np.ascontiguousarray(xh[:, ::stride, ::stride]).reshape(-1, C)
    else:
        xp = np.zeros((B, H + 2 * padding, W + 2 * padding, C), dtype=x.dtype)
        xp[:, padding:padding + H, padding:padding + W] = xh
        cols = np.empty((B, Ho, Wo, K, K, C), dtype=x.dtype)
        for ki in range(K):
            for kj in range(K):
                cols[:, :, :, ki, kj] = xp[:, ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride]
        cols = cols.reshape(B * Ho * Wo, K * K * C)
    out = cols @ wmat.T
    if bias is not None:
        out += bias
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    cache = (x.shape, cols, weight, stride, padding)
    return np.ascontiguousarray(out), cache


def conv2d_backward(dout, cache):
    x_shape, cols, weight, stride, padding = cache
    B, C, H, W = x_shape
    O, _, K, _ = weight.shape
    _, _, Ho, Wo = dout.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, O)
    wmat = weight.transpose(0, 2, 3, 1).reshape(O, -1)
    dweight = (d2.T @ cols).reshape(O, K, K, C).transpose(0, 3, 1, 2)
    dbias = d2.sum(axis=0)
    dcols = d2 @ wmat
    if K == 1 and padding == 0:
        dxs = dcols.reshape(B, Ho, Wo, C)
        dxh = np.zeros((B, H, W, C), dtype=dcols.dtype) if stride > 1 else dxs
        if stride > 1:
            dxh[:, ::stride, ::stride] = dxs
    else:
        dcols = dcols.reshape(B, Ho, Wo, K, K, C)
        dxh = np.zeros((B, H + 2 * padding, W + 2 * padding, C), dtype=dcols.dtype)
        for ki in range(K):
            for kj in range(K):
                dxh[:, ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride] += dcols[:, :, :, ki, kj]
        dxh = dxh[:, padding:padding + H, padding:padding + W]
    return np.ascontiguousarray(dxh.transpose(0, 3, 1, 2)), np.ascontiguousarray(dweight), dbias


def instance_norm_forward(x, eps: float = DEFAULT_EPS):
    """Normalize every (sample, channel) slice over its spatial extent."""
    _expect_ndim(x, 4, "instance_norm")
    if eps <= 0:
        raise ValueError("instance_norm: eps must be positive")
    n = x.shape[2] * x.shape[3]
    mu = np.einsum("bchw->bc", x) / n
    xc = x - mu[:, :, None, None]
    var = np.einsum("bchw,bchw->bc", xc, xc) / n
    inv_std = (1.0 / np.sqrt(var + eps))[:, :, None, None]
    xhat = xc * inv_std
    return xhat, (xhat, inv_std)


def instance_norm_backward(dout, cache):
    xhat, inv_std = cache
    n = xhat.shape[2] * xhat.shape[3]
    sum_d = np.einsum("bchw->bc", dout)[:, :, None, None]
    sum_dx = np.einsum("bchw,bchw->bc", dout, xhat)[:, :, None, None]
    return inv_std * (dout - sum_d / n - xhat * sum_dx / n)


def _channel_sum(x):
    return np.einsum("bc->c", x) if x.ndim == 2 else np.einsum("bchw->c", x)


def _channel_dot(x, y):
    return np.einsum("bc,bc->c", x, y) if x.ndim == 2 else np.einsum("bchw,bchw->c", x, y)


def batch_norm_forward(x, gamma, beta, running_mean, running_var, training: bool,
                       momentum: float = 0.1, eps: float = DEFAULT_EPS):
    """Per-channel batch normalization for 2-d ``[B,C]`` or 4-d ``[B,C,H,W]`` input.

    In training mode the running statistics arrays are updated in place as
    ``(1 - momentum) * running + momentum * batch``; the biased batch variance
    is tracked so that eval on a single batch reproduces its training output.
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batch_norm: expected 2-d or 4-d input, got shape {x.shape}")
    shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    if x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batch_norm: input {x.shape} vs {gamma.shape[0]} channels")
    if training:
        n = x.size // x.shape[1]
        mu = _channel_sum(x) / n
        xc = x - mu.reshape(shape)
        var = _channel_dot(xc, xc) / n
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        xc = x - running_mean.reshape(shape)
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std.reshape(shape)
    out = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return out, (xhat, inv_std, gamma, shape, training)


def batch_norm_backward(dout, cache):
    xhat, inv_std, gamma, shape, training = cache
    dgamma = _channel_dot(dout, xhat)
    dbeta = _channel_sum(dout)
    scale = (gamma * inv_std).reshape(shape)
    if not training:
        return dout * scale, dgamma, dbeta
    n = dout.size // dout.shape[1]
    dx = scale * (dout - (dbeta / n).reshape(shape) - xhat * (dgamma / n).reshape(shape))
    return dx, dgamma, dbeta


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def linear_forward(x, weight, bias=None):
    """``y = x W^T + b`` with ``weight`` shaped ``[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out, (x, weight)


def linear_backward(dout, cache):
    x, weight = cache
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


def global_avg_pool_forward(x):
    _expect_ndim(x, 4, "global_avg_pool")
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dout, x_shape):
    B, C, H, W = x_shape
    return np.broadcast_to((dout / (H * W))[:, :, None, None], x_shape).copy()


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

# attributes that hold per-batch forward state
_FORWARD_STATE = ("_cache", "_xhat", "_mask", "_shape", "_grouped")


class Module:
    """Container base: tracks parameters, buffers and child modules by name."""

    def __init__(self):
        self.training = True
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, Tensor] = {}
        self.children: Dict[str, "Module"] = {}

    def add(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def named_tensors(self, prefix: str = "", include_buffers: bool = True
                      ) -> Iterator[Tuple[str, Tensor]]:
        for name, t in self.params.items():
            yield prefix + name, t
        if include_buffers:
            for name, t in self.buffers.items():
                yield prefix + name, t
        for cname, child in self.children.items():
            yield from child.named_tensors(f"{prefix}{cname}.", include_buffers)

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_tensors(include_buffers=False)]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self.children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def clear_caches(self) -> "Module":
        """Drop activations saved for backward (a finished model need not hold them)."""
        for name in _FORWARD_STATE:
            if name in self.__dict__:
                setattr(self, name, None)
        for child in self.children.values():
            child.clear_caches()
        return self

    def astype(self, dtype) -> "Module":
        for _, t in self.named_tensors():
            t.astype(dtype)
        return self

    def __call__(self, x):
        return self.forward(x)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 padding: int = 0, bias: bool = False, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        w = rng.standard_normal((out_ch, in_ch, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        self.params["weight"] = Tensor(w.astype(np.float32))
        if bias:
            self.params["bias"] = Tensor(np.zeros(out_ch, np.float32))
        self.stride, self.padding = stride, padding
        self._cache = None

    def forward(self, x):
        b = self.params.get("bias")
        out, self._cache = conv2d_forward(x, self.params["weight"].data,
                                          None if b is None else b.data,
                                          self.stride, self.padding)
        return out

    def backward(self, dout):
        dx, dw, db = conv2d_backward(dout, self._cache)
        self.params["weight"].grad += dw
        if "bias" in self.params:
            self.params["bias"].grad += db
        return dx


class BatchNorm(Module):
    """Batch normalization with learnable scale/shift and running statistics."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = DEFAULT_EPS):
        super().__init__()
        self.params["weight"] = Tensor(np.ones(channels, np.float32))
        self.params["bias"] = Tensor(np.zeros(channels, np.float32))
        self.buffers["running_mean"] = Tensor(np.zeros(channels, np.float32), requires_grad=False)
        self.buffers["running_var"] = Tensor(np.ones(channels, np.float32), requires_grad=False)
        self.buffers["num_batches"] = Tensor(np.zeros(1, np.int64), requires_grad=False)
        self.momentum, self.eps = momentum, eps
        self._cache = None

    def forward(self, x):
        if not self.training and self.buffers["num_batches"].data[0] == 0:
            raise StateError("batch_norm: eval mode requires populated running statistics")
        rm, rv = self.buffers["running_mean"].data, self.buffers["running_var"].data
        out, self._cache = batch_norm_forward(
            x, self.params["weight"].data, self.params["bias"].data, rm, rv,
            self.training, self.momentum, self.eps)
        if self.training:
            self.buffers["num_batches"].data[0] += 1
        return out

    def backward(self, dout):
        dx, dg, db = batch_norm_backward(dout, self._cache)
        self.params["weight"].grad += dg
        self.params["bias"].grad += db
        return dx


class InstanceNorm(Module):
    """Instance normalization; no affine parameters unless ``affine=True``."""

    def __init__(self, channels: int, eps: float = DEFAULT_EPS, affine: bool = False):
        super().__init__()
        self.eps = eps
        self.affine = affine
        if affine:
            self.params["weight"] = Tensor(np.ones(channels, np.float32))
            self.params["bias"] = Tensor(np.zeros(channels, np.float32))
        self._cache = None

    def forward(self, x):
        out, self._cache = instance_norm_forward(x, self.eps)
        if self.affine:
            self._xhat = out
            out = out * self.params["weight"].data[:, None, None] + self.params["bias"].data[:, None, None]
        return out

    def backward(self, dout):
        if self.affine:
            self.params["weight"].grad += (dout * self._xhat).sum(axis=(0, 2, 3))
            self.params["bias"].grad += dout.sum(axis=(0, 2, 3))
            dout = dout * self.params["weight"].data[:, None, None]
        return instance_norm_backward(dout, self._cache)


class ReLU(Module):
    def forward(self, x):
        out, self._mask = relu_forward(x)
        return out

    def backward(self, dout):
        return relu_backward(dout, self._mask)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: Optional[np.random.Generator] = None, std: Optional[float] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        std = np.sqrt(2.0 / in_features) if std is None else std
        self.params["weight"] = Tensor((rng.standard_normal((out_features, in_features)) * std)
                                       .astype(np.float32))
        if bias:
            self.params["bias"] = Tensor(np.zeros(out_features, np.float32))
        self._cache = None

    def forward(self, x):
        b = self.params.get("bias")
        out, self._cache = linear_forward(x, self.params["weight"].data, None if b is None else b.data)
        return out

    def backward(self, dout):
        dx, dw, db = linear_backward(dout, self._cache)
        self.params["weight"].grad += dw
        if "bias" in self.params:
            self.params["bias"].grad += db
        return dx


class GlobalAvgPool(Module):
    def forward(self, x):
        out, self._shape = global_avg_pool_forward(x)
        return out

    def backward(self, dout):
        return global_avg_pool_backward(dout, self._shape)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            self.add(str(i), layer)

    def forward(self, x):
        for layer in self.children.values():
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(list(self.children.values())):
            dout = layer.backward(dout)
        return dout


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Max relative error per checked input, plus anything left out."""

    errors: Dict[str, float] = field(default_factory=dict)
    excluded: Dict[str, int] = field(default_factory=dict)
    degenerate: bool = False

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tolerance: float) -> bool:
        return self.max_error < tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest absolute deviation, scaled by the larger gradient magnitude.

    ``floor`` bounds the scale from below so that an input whose true
    gradient is zero (e.g. a bias feeding straight into IN) is judged by
    absolute error instead of by the ratio of two round-off values.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def grad_check(fn: Callable[[Dict[str, np.ndarray]], Tuple[float, Dict[str, np.ndarray]]],
               inputs: Dict[str, np.ndarray], step: float = 1e-4,
               exclude: Optional[Dict[str, np.ndarray]] = None) -> GradCheckReport:
    """Compare analytic gradients of a scalar function with central differences.

    ``fn`` maps a dict of float64 arrays to ``(loss, grads)`` where ``grads``
    has an entry per input.  ``exclude`` optionally holds boolean masks of
    entries to skip (non-smooth or degenerate points).
    """
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    loss0, grads = fn({k: v.copy() for k, v in inputs.items()})
    loss1, _ = fn({k: v.copy() for k, v in inputs.items()})
    if loss0 != loss1:
        raise StateError("grad_check: function is not deterministic")
    report = GradCheckReport()
    for name, value in inputs.items():
        mask = None if exclude is None else exclude.get(name)
        analytic = np.asarray(grads[name], dtype=np.float64)
        numeric = np.zeros_like(value)
        skipped = 0
        for idx in np.ndindex(value.shape):
            if mask is not None and mask[idx]:
                skipped += 1
                continue
            probe = {k: v.copy() for k, v in inputs.items()}
            probe[name][idx] += step
            up, _ = fn(probe)
            probe[name][idx] -= 2 * step
            down, _ = fn(probe)
            numeric[idx] = (up - down) / (2 * step)
        if mask is not None:
            analytic = np.where(mask, 0.0, analytic)
            report.excluded[name] = skipped
        if skipped == value.size:
            report.degenerate = True
            continue
        report.errors[name] = relative_error(analytic, numeric)
    return report


def layer_grad_fn(layer: Module, projection: np.ndarray):
    """Adapt a layer into a ``grad_check`` function: loss = sum(layer(x) * projection).

    The returned function accepts ``x`` and every parameter name of the layer.
    """
    def fn(values):
        for name, t in layer.params.items():
            t.data = values[name]
            t.grad = np.zeros_like(values[name])
        out = layer.forward(values["x"])
        loss = float((out * projection).sum())
        dx = layer.backward(projection.astype(out.dtype))
        grads = {"x": dx}
        grads.update({name: t.grad for name, t in layer.params.items()})
        return loss, grads
    return fn


def instance_norm_degenerate(x: np.ndarray, min_var: float = 1e-3) -> np.ndarray:
    """Boolean mask of entries whose (b, c) slice has variance below ``min_var``."""
    var = x.var(axis=(2, 3), keepdims=True)
    return np.broadcast_to(var < min_var, x.shape)
