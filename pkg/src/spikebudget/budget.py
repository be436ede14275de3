"""Spike-rate measurement and the adaptive energy budget.

The differentiable part is a squared penalty lambda * (r - r_target)^2 on
the current batch's hidden spike rate; its gradient is bidirectional, so it
also re-excites a net that has gone too quiet. The non-differentiable part
is a clipped proportional controller that nudges lambda after every
optimizer step, driven by a short windowed mean of recent batch rates
(the window absorbs batch noise; the per-step cadence keeps it responsive).

lambda starts at 0 and persists across task boundaries.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass
class BudgetConfig:
    r_target: float = 0.10
    eta: float = 0.2
    lambda_min: float = 0.0
    lambda_max: float = 5.0
    window: int = 5

    def __post_init__(self):
        if not 0.0 < self.r_target < 1.0:
            raise ValueError("r_target must lie in (0, 1)")
        if self.eta <= 0.0:
            raise ValueError("eta must be positive")
        if not 0.0 <= self.lambda_min < self.lambda_max:
            raise ValueError("need 0 <= lambda_min < lambda_max")
        if self.window < 1:
            raise ValueError("window must be >= 1")


@dataclass
class BudgetControllerState:
    lambda_rate: float = 0.0
    rate_window: deque = field(default_factory=lambda: deque(maxlen=5))

    @classmethod
    def init(cls, cfg: BudgetConfig) -> "BudgetControllerState":
        return cls(lambda_rate=cfg.lambda_min,
                   rate_window=deque(maxlen=cfg.window))

    def windowed_rate(self) -> float:
        if not self.rate_window:
            raise ValueError("rate window is empty")
        return float(sum(self.rate_window) / len(self.rate_window))


def spike_rate(spikes: np.ndarray) -> float:
    """Fraction of (unit, timestep, sample) cells that fired.

    The monitored population is whatever tensor is passed in; the training
    loop passes hidden-layer spikes only.
    """
    spikes = np.asarray(spikes)
    if spikes.size == 0:
        raise ValueError("empty spike tensor")
    return float(spikes.sum(dtype=np.float64) / spikes.size)


def budget_penalty(r_spike: float, r_target: float,
                   lambda_rate: float) -> tuple[float, float]:
    """Squared budget penalty and its derivative in r (bidirectional)."""
    diff = r_spike - r_target
    return lambda_rate * diff * diff, 2.0 * lambda_rate * diff


def controller_update(state: BudgetControllerState, cfg: BudgetConfig,
                      r_batch: float) -> BudgetControllerState:
    """Push one batch rate and apply the clipped proportional lambda step."""
    if not 0.0 <= r_batch <= 1.0:
        raise ValueError(f"r_batch {r_batch} outside [0, 1]")
    state.rate_window.append(float(r_batch))
    r_bar = state.windowed_rate()
    lam = state.lambda_rate + cfg.eta * (r_bar - cfg.r_target)
    state.lambda_rate = float(min(max(lam, cfg.lambda_min), cfg.lambda_max))
    return state


@dataclass
class BudgetLogRecord:
    """One controller step as it lands in the run CSV."""

    step: int
    r_batch: float
    r_windowed: float
    lambda_rate: float
    penalty: float
    loss: float = float("nan")
