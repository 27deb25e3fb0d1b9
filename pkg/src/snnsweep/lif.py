"""Discrete leaky integrate-and-fire dynamics.

The continuous model ``tau dV/dt = -(V - V_r) + I(t)`` with reset to ``V_r``
on crossing ``V_th`` is integrated here in its iterative form::

    V[t+1] = V[t] * f(o[t]) + x[t+1]
    o[t+1] = g(V[t+1])

with ``f(0) = tau`` (leak), ``f(1) = 0`` (reset to zero) and ``g`` the
Heaviside step at ``v_th`` (inclusive). The bias is part of ``x``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class LifParams:
    v_th: float = 0.4
    tau: float = 0.25
    v_r: float = 0.0
    r_in: float = 1.0

    def __post_init__(self):
        if not self.v_th > 0:
            raise ConfigError(f"v_th must be > 0, got {self.v_th}")
        if not 0 < self.tau < 1:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if self.v_r != 0.0 or self.r_in != 1.0:
            raise ConfigError("only v_r = 0 and r_in = 1 are supported")


@dataclass
class LifState:
    v_m: np.ndarray
    o_prev: np.ndarray

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape))


def leak(o, params: LifParams):
    """Reset/leak gate ``f``: ``tau`` where silent, ``0`` where spiking.

    Written as ``tau * (1 - o)`` so it also serves fractional outputs of the
    smooth relaxation.
    """
    return params.tau * (1.0 - o)


def fire(v, params: LifParams):
    return (v >= params.v_th).astype(np.float64)


def fire_smooth(v, params: LifParams, a: float):
    """Clamped linear ramp of half-width ``a`` centred on the threshold."""
    ramp = np.clip((v - params.v_th) / (2.0 * a) + 0.5, 0.0, 1.0)
    # pin the ramp ends so the outer region is bit-equal to the hard step
    return np.where(v >= params.v_th + a, 1.0, np.where(v <= params.v_th - a, 0.0, ramp))


def _check(state: LifState, x):
    if state.v_m.shape != x.shape or state.o_prev.shape != x.shape:
        raise ConfigError(
            f"LIF shape mismatch: v_m {state.v_m.shape}, o_prev {state.o_prev.shape}, x {x.shape}")


def lif_step(state: LifState, x, params: LifParams):
    """One hard-threshold timestep. Returns ``(new_state, spikes)``."""
    x = np.asarray(x, dtype=np.float64)
    _check(state, x)
    v = state.v_m * leak(state.o_prev, params) + x
    o = fire(v, params)
    return LifState(v, o), o


def lif_step_smooth(state: LifState, x, params: LifParams, a: float = 0.5):
    """Differentiable relaxation of :func:`lif_step` used for gradient checks."""
    if not a > 0:
        raise ConfigError(f"surrogate half-width must be > 0, got {a}")
    x = np.asarray(x, dtype=np.float64)
    _check(state, x)
    v = state.v_m * leak(state.o_prev, params) + x
    o = fire_smooth(v, params, a)
    return LifState(v, o), o


def run_lif(x_seq, params: LifParams, mode: str = "hard", a: float = 0.5):
    """Unroll a layer over the leading time axis of ``x_seq``.

    Starts from ``v_m = 0, o_prev = 0``. Returns ``(v_seq, o_seq)`` with the
    same shape as ``x_seq``.
    """
    x_seq = np.asarray(x_seq, dtype=np.float64)
    v_seq = np.empty_like(x_seq)
    o_seq = np.empty_like(x_seq)
    state = LifState.zeros(x_seq.shape[1:])
    for t in range(x_seq.shape[0]):
        if mode == "hard":
            state, o = lif_step(state, x_seq[t], params)
        elif mode == "smooth":
            state, o = lif_step_smooth(state, x_seq[t], params, a)
        else:
            raise ConfigError(f"unknown LIF mode {mode!r}")
        v_seq[t] = state.v_m
        o_seq[t] = o
    return v_seq, o_seq
