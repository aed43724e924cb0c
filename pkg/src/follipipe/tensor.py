"""Dense float64 tensor ops with hand-written backward passes.

Every op is a pure function over numpy float64 arrays (C-order, so an
array literally is "shape + flat row-major data"). Differentiable ops come
in forward/backward pairs; the backward takes the upstream gradient plus
the forward inputs, so no hidden state is kept and concurrent use is safe.
`grad_check` verifies any (value, grads) closure against central finite
differences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Tensor = np.ndarray


def as_tensor(data) -> Tensor:
    """Coerce to a C-contiguous float64 array."""
    return np.ascontiguousarray(data, dtype=np.float64)


def assert_finite(x: Tensor, name: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class ConvSpec:
    """Static shape/geometry of a 2D convolution."""

    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        for field in ("kernel_h", "kernel_w", "stride", "dilation",
                      "in_channels", "out_channels"):
            if getattr(self, field) < 1:
                raise ValueError(f"ConvSpec.{field} must be >= 1, got {getattr(self, field)}")
        if self.padding < 0:
            raise ValueError(f"ConvSpec.padding must be >= 0, got {self.padding}")

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.dilation * (self.kernel_h - 1) - 1) // self.stride + 1
        ow = (w + 2 * self.padding - self.dilation * (self.kernel_w - 1) - 1) // self.stride + 1
        return oh, ow


def _check_conv_shapes(x: Tensor, w: Tensor, b: Tensor, spec: ConvSpec) -> tuple[int, int]:
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be 4D [N,C,H,W], got ndim={x.ndim}")
    n, c, h, width = x.shape
    if c != spec.in_channels:
        raise ValueError(f"conv2d input channels={c} do not match spec.in_channels={spec.in_channels}")
    if w.shape != (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w):
        raise ValueError(
            f"conv2d weights shape {w.shape} does not match spec "
            f"({spec.out_channels},{spec.in_channels},{spec.kernel_h},{spec.kernel_w})")
    if b.shape != (spec.out_channels,):
        raise ValueError(f"conv2d bias shape {b.shape} does not match out_channels={spec.out_channels}")
    oh, ow = spec.out_hw(h, width)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d output size {oh}x{ow} < 1 for input {h}x{width} with {spec}")
    return oh, ow


def _pad_input(x: Tensor, padding: int) -> Tensor:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col(xp: Tensor, spec: ConvSpec, oh: int, ow: int) -> Tensor:
    """Gather receptive fields: (N, C*kh*kw, oh*ow), taps in row-major order."""
    n, c = xp.shape[:2]
    kh, kw, s, d = spec.kernel_h, spec.kernel_w, spec.stride, spec.dilation
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xp[:, :, u * d:u * d + s * (oh - 1) + 1:s,
                                  v * d:v * d + s * (ow - 1) + 1:s]
    return cols.reshape(n, c * kh * kw, oh * ow)


def conv2d(x: Tensor, w: Tensor, b: Tensor, spec: ConvSpec) -> Tensor:
    """2D convolution (cross-correlation) with zero padding and dilation."""
    oh, ow = _check_conv_shapes(x, w, b, spec)
    n = x.shape[0]
    cols = _im2col(_pad_input(x, spec.padding), spec, oh, ow)
    w2 = w.reshape(spec.out_channels, -1)
    out = np.matmul(w2, cols) + b[:, None]
    return out.reshape(n, spec.out_channels, oh, ow)


def conv2d_backward(grad_out: Tensor, x: Tensor, w: Tensor,
                    spec: ConvSpec) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients of sum(grad_out * conv2d(x, w, b)) w.r.t. x, w, b."""
    oh, ow = spec.out_hw(x.shape[2], x.shape[3])
    if grad_out.shape != (x.shape[0], spec.out_channels, oh, ow):
        raise ValueError(
            f"conv2d_backward grad_out shape {grad_out.shape} does not match "
            f"forward output ({x.shape[0]},{spec.out_channels},{oh},{ow})")
    n = x.shape[0]
    kh, kw, s, d, p = spec.kernel_h, spec.kernel_w, spec.stride, spec.dilation, spec.padding
    xp = _pad_input(x, p)
    cols = _im2col(xp, spec, oh, ow)
    g2 = grad_out.reshape(n, spec.out_channels, oh * ow)

    grad_b = g2.sum(axis=(0, 2))
    grad_w = np.einsum("nol,nkl->ok", g2, cols).reshape(w.shape)

    w2 = w.reshape(spec.out_channels, -1)
    gcols = np.matmul(w2.T, g2).reshape(n, x.shape[1], kh, kw, oh, ow)
    grad_xp = np.zeros_like(xp)
    for u in range(kh):
        for v in range(kw):
            grad_xp[:, :, u * d:u * d + s * (oh - 1) + 1:s,
                    v * d:v * d + s * (ow - 1) + 1:s] += gcols[:, :, u, v]
    if p:
        grad_x = grad_xp[:, :, p:-p, p:-p]
    else:
        grad_x = grad_xp
    return grad_x, grad_w, grad_b


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: Tensor, x: Tensor) -> Tensor:
    # Gradient at exactly 0 is taken as 0.
    return grad_out * (x > 0.0)


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Max pooling over window x window patches."""
    if x.ndim != 4:
        raise ValueError(f"maxpool2d input must be 4D [N,C,H,W], got ndim={x.ndim}")
    if window < 1 or stride < 1:
        raise ValueError("maxpool2d window and stride must be >= 1")
    spec = ConvSpec(window, window, stride=stride,
                    in_channels=x.shape[1], out_channels=x.shape[1])
    oh, ow = spec.out_hw(x.shape[2], x.shape[3])
    if oh < 1 or ow < 1:
        raise ValueError(f"maxpool2d output size {oh}x{ow} < 1")
    cols = _pool_cols(x, window, stride, oh, ow)
    return cols.max(axis=2)


def _pool_cols(x: Tensor, window: int, stride: int, oh: int, ow: int) -> Tensor:
    """(N, C, window*window, oh, ow) with taps in row-major scan order."""
    n, c = x.shape[:2]
    cols = np.empty((n, c, window * window, oh, ow), dtype=np.float64)
    for u in range(window):
        for v in range(window):
            cols[:, :, u * window + v] = x[:, :, u:u + stride * (oh - 1) + 1:stride,
                                           v:v + stride * (ow - 1) + 1:stride]
    return cols


def maxpool2d_backward(grad_out: Tensor, x: Tensor, window: int, stride: int) -> Tensor:
    """Routes gradient to the window argmax; ties go to the first tap in
    row-major scan order."""
    spec = ConvSpec(window, window, stride=stride,
                    in_channels=x.shape[1], out_channels=x.shape[1])
    oh, ow = spec.out_hw(x.shape[2], x.shape[3])
    if grad_out.shape != (x.shape[0], x.shape[1], oh, ow):
        raise ValueError(f"maxpool2d_backward grad_out shape {grad_out.shape} does not match "
                         f"forward output ({x.shape[0]},{x.shape[1]},{oh},{ow})")
    cols = _pool_cols(x, window, stride, oh, ow)
    am = cols.argmax(axis=2)  # first maximal tap in scan order
    grad_x = np.zeros_like(x)
    for t in range(window * window):
        u, v = divmod(t, window)
        grad_x[:, :, u:u + stride * (oh - 1) + 1:stride,
               v:v + stride * (ow - 1) + 1:stride] += grad_out * (am == t)
    return grad_x


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool input must be 4D [N,C,H,W], got ndim={x.ndim}")
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(grad_out: Tensor, in_shape: Sequence[int]) -> Tensor:
    n, c, h, w = in_shape
    if grad_out.shape != (n, c, 1, 1):
        raise ValueError(f"global_avg_pool_backward grad_out shape {grad_out.shape} "
                         f"does not match ({n},{c},1,1)")
    return np.broadcast_to(grad_out / (h * w), (n, c, h, w)).copy()


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ValueError(f"linear input must be 2D [N,F], got ndim={x.ndim}")
    if w.shape[0] != x.shape[1]:
        raise ValueError(f"linear input features={x.shape[1]} do not match weights rows={w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ValueError(f"linear bias shape {b.shape} does not match out features={w.shape[1]}")
    return x @ w + b


def linear_backward(grad_out: Tensor, x: Tensor, w: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    if grad_out.shape != (x.shape[0], w.shape[1]):
        raise ValueError(f"linear_backward grad_out shape {grad_out.shape} does not match "
                         f"({x.shape[0]},{w.shape[1]})")
    return grad_out @ w.T, x.T @ grad_out, grad_out.sum(axis=0)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"upsample_nearest input must be 4D [N,C,H,W], got ndim={x.ndim}")
    if factor < 1:
        raise ValueError(f"upsample_nearest factor must be >= 1, got {factor}")
    if factor == 1:
        return x.copy()
    return np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)


def upsample_nearest_backward(grad_out: Tensor, factor: int) -> Tensor:
    n, c, fh, fw = grad_out.shape
    if fh % factor or fw % factor:
        raise ValueError(f"upsample_nearest_backward grad_out {fh}x{fw} not divisible by factor={factor}")
    h, w = fh // factor, fw // factor
    return grad_out.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))


def subsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor downsampling: keep every factor-th pixel."""
    if x.ndim != 4:
        raise ValueError(f"subsample_nearest input must be 4D [N,C,H,W], got ndim={x.ndim}")
    if factor < 1 or x.shape[2] % factor or x.shape[3] % factor:
        raise ValueError(f"subsample_nearest factor={factor} does not divide "
                         f"spatial dims {x.shape[2]}x{x.shape[3]}")
    return x[:, :, ::factor, ::factor].copy()


def subsample_nearest_backward(grad_out: Tensor, in_shape: Sequence[int], factor: int) -> Tensor:
    grad_x = np.zeros(tuple(in_shape), dtype=np.float64)
    grad_x[:, :, ::factor, ::factor] = grad_out
    return grad_x


GradClosure = Callable[..., tuple[float, list[Tensor]]]


def grad_check(op_closure: GradClosure, inputs: Sequence[Tensor],
               epsilon: float = 1e-5, max_checks_per_input: int | None = None,
               rng: np.random.Generator | None = None,
               min_grad_fraction: float = 0.0) -> float:
    """Compare a closure's analytic gradients against central finite differences.

    op_closure(*inputs) must return (scalar, [grad w.r.t. each input]); the
    scalar is expected to be a sum-style reduction of the op outputs. Inputs
    are perturbed in place (and restored). When max_checks_per_input is set,
    only that many randomly chosen coordinates per input are probed;
    min_grad_fraction skips coordinates whose analytic gradient is below
    that fraction of the tensor's max |gradient| (finite differences cannot
    resolve near-cancelled coordinates).

    Returns max over probed coordinates of
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    _, grads = op_closure(*inputs)
    if len(grads) != len(inputs):
        raise ValueError(f"closure returned {len(grads)} gradients for {len(inputs)} inputs")
    worst = 0.0
    for inp, grad in zip(inputs, grads):
        flat = inp.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        idx = np.arange(flat.size)
        if min_grad_fraction > 0.0:
            cutoff = min_grad_fraction * np.abs(gflat).max()
            idx = idx[np.abs(gflat[idx]) >= cutoff]
        if max_checks_per_input is not None and idx.size > max_checks_per_input:
            sampler = rng if rng is not None else np.random.default_rng(0)
            idx = sampler.choice(idx, size=max_checks_per_input, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = op_closure(*inputs)[0]
            flat[i] = orig - epsilon
            f_minus = op_closure(*inputs)[0]
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            analytic = gflat[i]
            err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, err)
    return worst
