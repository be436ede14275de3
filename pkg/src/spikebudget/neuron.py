"""Leaky integrate-and-fire layer with learnable decay and threshold.

Membrane update per step:

    u' = beta * u + I - s_prev * v_thr
    spike = 1 where u' >= v_thr else 0

The reset is soft (reset-by-subtraction) and deferred: the spike recorded at
step t subtracts v_thr from the membrane at step t+1. Both beta and v_thr are
layer-wise scalars learned through unconstrained carriers, squashed so that
beta stays in (0, 1) and v_thr stays above a small positive floor.

The backward pass substitutes a fast-sigmoid surrogate 1/(1+k|u-v_thr|)^2 for
the Heaviside derivative. A relaxed step (soft spikes whose exact derivative
is that surrogate) exists purely so finite-difference checks can probe the
gradient code; training and inference always use the binary step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VTHR_FLOOR = 0.01
DEFAULT_K = 25.0


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _softplus(x):
    # log(1 + e^x), stable for large |x|
    return np.logaddexp(0.0, x)


def beta_from_raw(beta_raw):
    """Squash an unconstrained carrier into the decay rate beta in (0, 1)."""
    return _sigmoid(beta_raw)


def vthr_from_raw(vthr_raw):
    """Map an unconstrained carrier to a threshold >= VTHR_FLOOR."""
    return VTHR_FLOOR + _softplus(vthr_raw)


def raw_from_beta(beta: float) -> float:
    """Inverse of beta_from_raw, for initializing carriers at a target decay."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie strictly in (0, 1)")
    return float(np.log(beta / (1.0 - beta)))


def raw_from_vthr(v_thr: float) -> float:
    """Inverse of vthr_from_raw, for initializing carriers at a target threshold."""
    if v_thr <= VTHR_FLOOR:
        raise ValueError(f"v_thr must exceed the floor {VTHR_FLOOR}")
    return float(np.log(np.expm1(v_thr - VTHR_FLOOR)))


@dataclass
class LifParams:
    """Layer-wise LIF parameters held as unconstrained carriers.

    beta_raw and vthr_raw are 0-d float arrays so optimizer updates can write
    through them in place. k is the surrogate slope, fixed and never learned.
    """

    beta_raw: np.ndarray
    vthr_raw: np.ndarray
    k: float = DEFAULT_K
    learnable: bool = True

    @classmethod
    def init(cls, beta: float = 0.9, v_thr: float = 1.0, k: float = DEFAULT_K,
             learnable: bool = True, dtype=np.float32) -> "LifParams":
        return cls(
            beta_raw=np.array(raw_from_beta(beta), dtype=dtype),
            vthr_raw=np.array(raw_from_vthr(v_thr), dtype=dtype),
            k=float(k),
            learnable=learnable,
        )

    def constrained(self) -> tuple[float, float]:
        """Return (beta, v_thr) as python floats of the carrier dtype's value."""
        return float(beta_from_raw(self.beta_raw)), float(vthr_from_raw(self.vthr_raw))


@dataclass
class LifLayerState:
    """Per-sample dynamic state: membrane potential and previous-step spikes."""

    u: np.ndarray
    s_prev: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype=np.float32) -> "LifLayerState":
        return cls(u=np.zeros(shape, dtype=dtype), s_prev=np.zeros(shape, dtype=dtype))


def lif_step(state: LifLayerState, input_current: np.ndarray,
             params: LifParams) -> tuple[LifLayerState, np.ndarray]:
    """Advance the layer one timestep; returns (new state, binary spikes)."""
    input_current = np.asarray(input_current)
    if input_current.shape != state.u.shape:
        raise ValueError(
            f"input width {input_current.shape} != state width {state.u.shape}"
        )
    if not np.isfinite(input_current).all():
        raise ValueError("input current contains non-finite values")
    beta, v_thr = params.constrained()
    u_new = beta * state.u + input_current - state.s_prev * v_thr
    spikes = (u_new >= v_thr).astype(state.u.dtype)
    return LifLayerState(u=u_new, s_prev=spikes), spikes


def surrogate_grad(u, v_thr, k=DEFAULT_K):
    """Fast-sigmoid pseudo-derivative of the spike w.r.t. membrane potential."""
    return 1.0 / (1.0 + k * np.abs(u - v_thr)) ** 2


def soft_spike(x, k=DEFAULT_K):
    """Relaxed spike g(x) = x/(1+k|x|) + 1/k for x = u - v_thr.

    The offset 1/k makes g vanish as x -> -inf, so silent relaxed
    trajectories track the binary ones. g'(x) = 1/(1+k|x|)^2, i.e. exactly
    surrogate_grad.
    """
    return x / (1.0 + k * np.abs(x)) + 1.0 / k


def lif_step_relaxed(state: LifLayerState, input_current: np.ndarray,
                     params: LifParams) -> tuple[LifLayerState, np.ndarray]:
    """One timestep with soft spikes; only for gradient verification."""
    input_current = np.asarray(input_current)
    if input_current.shape != state.u.shape:
        raise ValueError(
            f"input width {input_current.shape} != state width {state.u.shape}"
        )
    if not np.isfinite(input_current).all():
        raise ValueError("input current contains non-finite values")
    beta, v_thr = params.constrained()
    u_new = beta * state.u + input_current - state.s_prev * v_thr
    spikes = soft_spike(u_new - v_thr, params.k).astype(state.u.dtype)
    return LifLayerState(u=u_new, s_prev=spikes), spikes
