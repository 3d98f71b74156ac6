"""Architecture-parameter machinery.

The backbone uses polarized gates g(a) = a^2 / (a^2 + eps): even in a,
bounded in [0, 1), exactly 0 at a = 0 and approaching 1 for |a| >> sqrt(eps).
Shrinking eps sharpens every nonzero gate toward 1, so a layer can keep any
non-empty subset of candidates. Fusion choices use a reparameterized
Gumbel-Softmax instead. Softmax (argmax-discretized) and scaled-sigmoid
weightings are provided as baseline strategies.

All functions accept scalars or numpy arrays and are pure; schedule state
is read-only during a step.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConfigError", "GateParams", "ScheduleState",
    "gate", "gate_grad", "epsilon_schedule", "tau_schedule",
    "gumbel_softmax", "gumbel_softmax_vjp",
    "darts_weights", "darts_weights_vjp", "dnal_gate", "dnal_gamma",
]


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


def gate(alpha, epsilon):
    """Polarized gate a^2 / (a^2 + eps), in [0, 1)."""
    if epsilon <= 0:
        raise ConfigError(f"gate epsilon must be > 0, got {epsilon}")
    a2 = np.square(alpha)
    return a2 / (a2 + epsilon)


def gate_grad(alpha, epsilon):
    """d/da of the polarized gate: 2*a*eps / (a^2 + eps)^2."""
    if epsilon <= 0:
        raise ConfigError(f"gate epsilon must be > 0, got {epsilon}")
    d = np.square(alpha) + epsilon
    return 2.0 * np.asarray(alpha, dtype=np.float64) * epsilon / (d * d)


@dataclass
class ScheduleState:
    """Endpoints for the per-step schedules over a search of total_steps.

    eps decays geometrically (uniform relative sharpening per step), tau
    likewise; the budget-penalty weight lam ramps linearly.
    """

    total_steps: int
    eps_start: float = 0.1
    eps_end: float = 1e-3
    tau_start: float = 5.0
    tau_end: float = 0.5
    lam_start: float = 0.1
    lam_end: float = 1.0

    def __post_init__(self):
        for name in ("eps_start", "eps_end", "tau_start", "tau_end",
                     "lam_start", "lam_end"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"schedule endpoint {name} must be > 0")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")


def _frac(state, t):
    if not 0 <= t <= state.total_steps:
        raise ConfigError(f"step {t} outside schedule 0..{state.total_steps}")
    return t / state.total_steps


def epsilon_schedule(state, t):
    """Geometric interpolation eps_start -> eps_end over the run."""
    return state.eps_start * (state.eps_end / state.eps_start) ** _frac(state, t)


def tau_schedule(state, t):
    """Geometric interpolation tau_start -> tau_end over the run."""
    return state.tau_start * (state.tau_end / state.tau_start) ** _frac(state, t)


def _softmax(z):
    e = np.exp(z - np.max(z))
    return e / e.sum()


def gumbel_softmax(logits, tau, rng):
    """One reparameterized Gumbel-Softmax draw over the logits.

    Returns soft weights summing to 1. With the noise held fixed the
    weights are differentiable in the logits (see gumbel_softmax_vjp);
    no straight-through hardening is applied.
    """
    if tau <= 0:
        raise ConfigError(f"gumbel tau must be > 0, got {tau}")
    logits = np.asarray(logits, dtype=np.float64)
    u = rng.random(logits.shape)
    gumbel = -np.log(-np.log(u))
    return _softmax((logits + gumbel) / tau)


def gumbel_softmax_vjp(weights, upstream, tau):
    """Chain upstream d/dweights back to the logits of the fixed-noise draw."""
    w = np.asarray(weights)
    u = np.asarray(upstream)
    return w * (u - np.dot(u, w)) / tau


def darts_weights(alpha_row):
    """Softmax weighting over one layer's candidate scores."""
    return _softmax(np.asarray(alpha_row, dtype=np.float64))


def darts_weights_vjp(weights, upstream):
    w = np.asarray(weights)
    u = np.asarray(upstream)
    return w * (u - np.dot(u, w))


def dnal_gate(alpha, gamma):
    """Scaled sigmoid weighting sigmoid(gamma * alpha)."""
    if gamma <= 0:
        raise ConfigError(f"dnal gamma must be > 0, got {gamma}")
    return 1.0 / (1.0 + np.exp(-gamma * np.asarray(alpha, dtype=np.float64)))


def dnal_gamma(t, total_steps, start=1.0, end=100.0):
    """Geometric sigmoid-scale ramp so gates are near-binary by the end."""
    if not 0 <= t <= total_steps:
        raise ConfigError(f"step {t} outside schedule 0..{total_steps}")
    return start * (end / start) ** (t / total_steps)


@dataclass
class GateParams:
    """All architecture parameters of one search run.

    alpha_backbone is (layers x candidates); alpha_fusion holds the four
    fusion logits. Backbone scores start at 1.0 (every gate ~0.91 at
    eps = 0.1) and fusion logits at 0.0 (uniform).
    """

    alpha_backbone: np.ndarray
    alpha_fusion: np.ndarray
    epsilon: float = 0.1
    step: int = 0

    @classmethod
    def initial(cls, num_layers, num_candidates=19, num_fusion=4):
        return cls(
            alpha_backbone=np.ones((num_layers, num_candidates)),
            alpha_fusion=np.zeros(num_fusion),
        )

    def copy(self):
        return GateParams(self.alpha_backbone.copy(), self.alpha_fusion.copy(),
                          self.epsilon, self.step)
