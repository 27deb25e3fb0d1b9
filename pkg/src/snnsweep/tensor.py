"""Forward/backward kernels for the three layer kinds used by the network.

Arrays are numpy ``float64`` ndarrays. Every function accepts any number of
leading batch axes in front of the per-sample shape, e.g. a convolution input
may be ``[C, H, W]`` or ``[T, N, C, H, W]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError

DTYPE = np.float64


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    padding: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.kernel_size < 1:
            raise ConfigError(f"kernel_size must be >= 1, got {self.kernel_size}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0 or self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(f"invalid conv spec {self}")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k, p, s = self.kernel_size, self.padding, self.stride
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ConfigError(f"kernel {k} with padding {p} does not fit input {h}x{w}")
        return ho, wo

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        k = self.kernel_size
        return (self.out_channels, self.in_channels, k, k)


@dataclass(frozen=True)
class PoolSpec:
    """Non-overlapping average pooling; stride equals ``window``."""

    window: int

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError(f"pool window must be >= 1, got {self.window}")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        if h < self.window or w < self.window:
            raise ConfigError(f"pool window {self.window} larger than input {h}x{w}")
        return h // self.window, w // self.window


def _split_batch(x, ndim, name):
    if x.ndim < ndim:
        raise ConfigError(f"{name}: expected at least {ndim} dims, got shape {x.shape}")
    lead = x.shape[: x.ndim - ndim]
    return lead, x.reshape((-1,) + x.shape[x.ndim - ndim:])


def _im2col(x, spec: ConvSpec):
    """[N, C, H, W] -> ([N*Ho*Wo, C*k*k], Ho, Wo)."""
    k, p, s = spec.kernel_size, spec.padding, spec.stride
    n, c, h, w = x.shape
    ho, wo = spec.output_hw(h, w)
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _check_conv(x, weights, spec):
    if weights.shape != spec.weight_shape:
        raise ConfigError(f"conv weights: shape {weights.shape} does not match spec {spec.weight_shape}")
    if x.shape[-3] != spec.in_channels:
        raise ConfigError(
            f"conv input channels: got {x.shape[-3]}, spec expects {spec.in_channels}")


def conv2d_forward(x, weights, bias, spec: ConvSpec, return_cols: bool = False):
    """Zero-padded cross-correlation: ``[..., C_in, H, W] -> [..., C_out, H', W']``.

    With ``return_cols`` the unfolded input patches are returned as well, for
    reuse by :func:`conv2d_backward`.
    """
    x = np.asarray(x, dtype=DTYPE)
    _check_conv(x, weights, spec)
    if bias.shape != (spec.out_channels,):
        raise ConfigError(f"conv bias: shape {bias.shape}, expected ({spec.out_channels},)")
    lead, xb = _split_batch(x, 3, "conv input")
    cols, ho, wo = _im2col(xb, spec)
    out = cols @ weights.reshape(spec.out_channels, -1).T
    out += bias
    out = out.reshape(xb.shape[0], ho, wo, spec.out_channels).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out).reshape(lead + (spec.out_channels, ho, wo))
    return (out, cols) if return_cols else out


def conv2d_backward(grad_out, saved_input, weights, spec: ConvSpec, cols=None,
                    input_grad: bool = True):
    """Adjoint of :func:`conv2d_forward`.

    Returns ``(grad_input, grad_weights, grad_bias)``; weight and bias
    gradients are summed over all leading batch axes. ``grad_input`` is None
    when ``input_grad`` is false.
    """
    x = np.asarray(saved_input, dtype=DTYPE)
    _check_conv(x, weights, spec)
    lead, xb = _split_batch(x, 3, "conv input")
    n, c, h, w = xb.shape
    ho, wo = spec.output_hw(h, w)
    expected = lead + (spec.out_channels, ho, wo)
    if grad_out.shape != expected:
        raise ConfigError(f"conv grad_out: shape {grad_out.shape}, expected {expected}")

    k, p, s = spec.kernel_size, spec.padding, spec.stride
    g2 = grad_out.reshape(n, spec.out_channels, ho * wo).transpose(0, 2, 1).reshape(-1, spec.out_channels)
    if cols is None:
        cols, _, _ = _im2col(xb, spec)
    grad_w = (g2.T @ cols).reshape(spec.weight_shape)
    grad_b = g2.sum(axis=0)
    if not input_grad:
        return None, grad_w, grad_b

    if s == 1 and p <= k - 1:
        # transposed correlation: flipped kernel, channels swapped
        flipped = np.ascontiguousarray(weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        back = ConvSpec(spec.out_channels, c, k, k - 1 - p, 1)
        gb4 = grad_out.reshape(n, spec.out_channels, ho, wo)
        dx = conv2d_forward(gb4, flipped, np.zeros(c), back)
        return dx.reshape(x.shape), grad_w, grad_b

    dcols = (g2 @ weights.reshape(spec.out_channels, -1)).reshape(n, ho, wo, c, k, k)
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p:p + h, p:p + w]
    return np.ascontiguousarray(dx).reshape(x.shape), grad_w, grad_b


def avgpool_forward(x, spec: PoolSpec):
    """Mean over non-overlapping windows; trailing rows/columns are dropped."""
    x = np.asarray(x, dtype=DTYPE)
    lead, xb = _split_batch(x, 3, "pool input")
    n, c, h, w = xb.shape
    ho, wo = spec.output_hw(h, w)
    k = spec.window
    if k == 1:
        return x.copy()
    out = xb[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k).sum(axis=5).sum(axis=3) / (k * k)
    return out.reshape(lead + (c, ho, wo))


def avgpool_backward(grad_out, spec: PoolSpec, input_hw: tuple[int, int]):
    """Spread each output gradient evenly over its window.

    ``input_hw`` is the spatial size of the forward input; cells dropped by the
    floor division receive zero gradient.
    """
    h, w = input_hw
    ho, wo = spec.output_hw(h, w)
    if grad_out.shape[-2:] != (ho, wo):
        raise ConfigError(f"pool grad_out: spatial {grad_out.shape[-2:]}, expected {(ho, wo)}")
    k = spec.window
    if k == 1:
        return np.array(grad_out, dtype=DTYPE)
    lead, gb = _split_batch(grad_out, 3, "pool grad_out")
    n, c = gb.shape[:2]
    dx = np.zeros((n, c, h, w), dtype=DTYPE)
    spread = np.repeat(np.repeat(gb, k, axis=2), k, axis=3) / (k * k)
    dx[:, :, :ho * k, :wo * k] = spread
    return dx.reshape(lead + (c, h, w))


def dense_forward(x, weights, bias):
    """``out = W @ x + b`` over the last axis."""
    x = np.asarray(x, dtype=DTYPE)
    m, n = weights.shape
    if x.shape[-1] != n:
        raise ConfigError(f"dense input length: got {x.shape[-1]}, weights expect {n}")
    if bias.shape != (m,):
        raise ConfigError(f"dense bias: shape {bias.shape}, expected ({m},)")
    return x @ weights.T + bias


def dense_backward(grad_out, saved_input, weights):
    """Returns ``(grad_input, grad_weights, grad_bias)`` summed over batch axes."""
    x = np.asarray(saved_input, dtype=DTYPE)
    m, n = weights.shape
    if x.shape[-1] != n or grad_out.shape != x.shape[:-1] + (m,):
        raise ConfigError(
            f"dense backward: grad_out {grad_out.shape} incompatible with input {x.shape} "
            f"and weights {weights.shape}")
    g2 = grad_out.reshape(-1, m)
    x2 = x.reshape(-1, n)
    return grad_out @ weights, g2.T @ x2, g2.sum(axis=0)
