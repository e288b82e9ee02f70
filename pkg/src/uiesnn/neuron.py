"""Leaky integrate-and-fire dynamics with soft reset and a fast-sigmoid surrogate.

Membrane update (one step)::

    V[t] = beta * V[t-1] + I[t] - V_th * S[t-1]
    S[t] = 1 if V[t] >= V_th else 0

``beta`` is ``logistic(decay_param)`` with one learnable scalar per layer.
The backward pass replaces dS/dV with ``1 / (1 + slope*|V - V_th|)**2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ShapeError, TapeError


@dataclass(frozen=True)
class LifConfig:
    """Neuron hyper-parameters.

    ``smooth=True`` swaps the Heaviside firing for the fast sigmoid
    ``v / (1 + slope*|v|)`` in the forward pass. That network is differentiable
    everywhere and its exact gradient is what the surrogate backward computes,
    which is how gradient checks are run.
    """

    threshold: float = 0.25
    surrogate_slope: float = 25.0
    decay_init: float = 0.5
    smooth: bool = False

    def __post_init__(self):
        errors = []
        if not self.threshold > 0:
            errors.append(f"threshold must be > 0, got {self.threshold}")
        if not self.surrogate_slope > 0:
            errors.append(f"surrogate_slope must be > 0, got {self.surrogate_slope}")
        if not 0 < self.decay_init < 1:
            errors.append(f"decay_init must lie in (0, 1), got {self.decay_init}")
        if errors:
            raise ConfigError("; ".join(errors))

    @property
    def decay_param_init(self):
        """Logit of ``decay_init``, the raw parameter value giving beta = decay_init."""
        return math.log(self.decay_init / (1.0 - self.decay_init))


def logistic(x):
    return 1.0 / (1.0 + math.exp(-x))


@dataclass
class LifState:
    v: np.ndarray
    s: np.ndarray
    decay_param: float

    @property
    def beta(self):
        return logistic(self.decay_param)

    @classmethod
    def zeros(cls, shape, decay_param, dtype=np.float32):
        return cls(np.zeros(shape, dtype), np.zeros(shape, dtype), float(decay_param))


class LifStepFacts(NamedTuple):
    """What one forward step leaves on the tape for its backward."""

    v_prev: np.ndarray
    v: np.ndarray


class LifGrads(NamedTuple):
    input: np.ndarray
    prev_v: np.ndarray
    decay_param: float


def heaviside(v, threshold):
    """1 where ``v >= threshold`` (the boundary fires), else 0."""
    v = np.asarray(v)
    return (v >= threshold).astype(v.dtype if v.dtype.kind == "f" else np.float32)


def fast_sigmoid(v, threshold, slope):
    d = np.asarray(v) - threshold
    return d / (1.0 + slope * np.abs(d))


def surrogate_grad(v, cfg):
    """Elementwise ``1 / (1 + slope*|v - V_th|)**2``; peaks at 1 on the threshold."""
    d = np.abs(np.asarray(v) - cfg.threshold)
    return 1.0 / np.square(1.0 + cfg.surrogate_slope * d)


def fire(v, cfg):
    if cfg.smooth:
        return fast_sigmoid(v, cfg.threshold, cfg.surrogate_slope).astype(v.dtype, copy=False)
    return heaviside(v, cfg.threshold)


def lif_step(state, current, cfg, *, spiking=True):
    """Advance one timestep. Returns ``(new_state, spikes)``.

    With ``spiking=False`` the neuron only integrates: no spike is emitted and
    no reset is applied, which is how the readout layer behaves.
    """
    current = np.asarray(current)
    if state.v.shape != current.shape or state.s.shape != current.shape:
        raise ShapeError("LIF state and input shapes differ", state.v.shape, current.shape)
    beta = np.asarray(state.beta, dtype=state.v.dtype)
    v = beta * state.v + current
    if spiking:
        v = v - cfg.threshold * state.s
        s = fire(v, cfg)
    else:
        s = np.zeros_like(v)
    v = v.astype(state.v.dtype, copy=False)
    return LifState(v, s, state.decay_param), s


def lif_backward(facts, grad_spikes, grad_next_v, cfg, decay_param, *, grad_v=None, spiking=True):
    """Reverse one LIF step.

    ``grad_next_v`` is dL/dV[t+1] (zero at the last step). It reaches V[t]
    through the leak (times beta) and reaches S[t] through the soft reset
    (times -V_th); the spike path then goes through the surrogate.
    ``grad_v`` is an extra cotangent applied directly to V[t] (used by the readout).

    Returns dL/dI[t] (equal to dL/dV[t], to be passed as ``grad_next_v`` for
    step t-1), the leak term ``beta * dL/dV[t]`` and this step's contribution
    to dL/d(decay_param).
    """
    if facts is None or facts.v is None or facts.v_prev is None:
        raise TapeError("lif_backward called without recorded membrane potentials")
    beta = logistic(decay_param)
    g = beta * grad_next_v if grad_next_v is not None else np.zeros_like(facts.v)
    if spiking:
        gs = grad_spikes if grad_spikes is not None else 0.0
        if grad_next_v is not None:
            gs = gs - cfg.threshold * grad_next_v
        g = g + gs * surrogate_grad(facts.v, cfg)
    if grad_v is not None:
        g = g + grad_v
    g = np.asarray(g, dtype=facts.v.dtype)
    grad_decay = float(np.vdot(g, facts.v_prev)) * beta * (1.0 - beta)
    return LifGrads(g, beta * g, grad_decay)


def lif_forward_sequence(currents, decay_param, cfg, *, spiking=True, dtype=None):
    """Run a layer of LIF neurons over ``currents[t]`` for t = 0..T-1.

    ``currents`` is either a ``(T, ...)`` array or a tuple ``(T, frame)`` for a
    constant input repeated T times. Returns the membrane and spike
    trajectories, each shaped ``(T, ...)``.
    """
    if isinstance(currents, tuple):
        steps, frame = currents
        frames = [frame] * steps
    else:
        steps = currents.shape[0]
        frames = currents
    shape = np.shape(frames[0])
    dtype = dtype or np.asarray(frames[0]).dtype
    state = LifState.zeros(shape, decay_param, dtype)
    vs = np.empty((steps,) + shape, dtype)
    ss = np.empty((steps,) + shape, dtype)
    for t in range(steps):
        state, spikes = lif_step(state, frames[t], cfg, spiking=spiking)
        vs[t] = state.v
        ss[t] = spikes
    return vs, ss


def lif_backward_sequence(vs, grad_spikes, decay_param, cfg, *, grad_last_v=None, spiking=True):
    """Backward of ``lif_forward_sequence``.

    ``grad_spikes`` is dL/dS for every step (``(T, ...)`` or None) and
    ``grad_last_v`` a cotangent on V[T-1] only. Returns ``(dL/dI, dL/d decay_param)``.
    """
    steps = vs.shape[0]
    grad_input = np.empty_like(vs)
    grad_decay = 0.0
    zeros = np.zeros(vs.shape[1:], vs.dtype)
    g_next = None
    for t in reversed(range(steps)):
        facts = LifStepFacts(vs[t - 1] if t > 0 else zeros, vs[t])
        gv = grad_last_v if t == steps - 1 else None
        gs = grad_spikes[t] if grad_spikes is not None else None
        grads = lif_backward(facts, gs, g_next, cfg, decay_param, grad_v=gv, spiking=spiking)
        grad_input[t] = grads.input
        grad_decay += grads.decay_param
        g_next = grads.input
    return grad_input, grad_decay
