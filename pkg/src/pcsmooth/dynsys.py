"""Dynamical system layer: Lorenz-84 right-hand side and an adaptive
embedded Runge-Kutta integrator.

The integrator works on autonomous systems ``dx/dt = f(x)`` in model time
units. Experiment-facing code converts wall-clock style units (hours) to
model time before calling into this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "SystemParams",
    "IntegratorConfig",
    "IntegrationError",
    "lorenz84_rhs",
    "lorenz84",
    "integrate",
    "propagate_ensemble",
]

# type alias used throughout: a state is a 1-d float array
StateVector = np.ndarray


class IntegrationError(RuntimeError):
    """Raised when the adaptive step size underflows (trajectory blow-up)."""


@dataclass(frozen=True)
class SystemParams:
    """Coefficients of the three-component atmospheric toy model.

    ``a`` damps the zonal flow component, ``b`` controls displacement of
    the wave components and ``f1``, ``f2`` are the two constant forcings.
    """

    a: float = 0.25
    b: float = 4.0
    f1: float = 8.0
    f2: float = 1.0

    def __post_init__(self) -> None:
        for name in ("a", "b", "f1", "f2"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"SystemParams.{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class IntegratorConfig:
    """Settings for the embedded Dormand-Prince 4(5) stepper.

    The error test is a mixed absolute/relative max norm over components:
    a step is accepted when ``max_i |e_i| / (abs_tol + rel_tol * |y_i|) <= 1``.
    """

    abs_tol: float = 1e-8
    rel_tol: float = 1e-8
    initial_step: float = 1e-2
    max_step: float = math.inf
    min_step: float = 1e-13

    def __post_init__(self) -> None:
        if self.abs_tol <= 0.0 or self.rel_tol < 0.0:
            raise ValueError("tolerances must be positive")
        if not (self.min_step <= self.initial_step <= self.max_step):
            raise ValueError(
                "step bounds must satisfy min_step <= initial_step <= max_step, "
                f"got {self.min_step} <= {self.initial_step} <= {self.max_step}"
            )


def lorenz84_rhs(state: StateVector, params: SystemParams) -> StateVector:
    """Time derivative of the three-component chaotic circulation model.

    Parameters
    ----------
    state : ndarray, shape (3,)
        Current state ``(x, y, z)``: zonal flow strength plus the cosine
        and sine wave amplitudes.
    params : SystemParams
        Model coefficients.

    Returns
    -------
    ndarray, shape (3,)
        Arrays of shape (..., 3) are treated as stacks of states and
        produce the matching stack of derivatives.
    """
    state = np.asarray(state, dtype=float)
    if state.shape[-1] != 3:
        raise ValueError(f"state must have 3 components, got shape {state.shape}")
    x, y, z = state[..., 0], state[..., 1], state[..., 2]
    return np.stack(
        (
            -params.a * x - y * y - z * z + params.a * params.f1,
            -y + x * y - params.b * x * z + params.f2,
            -z + x * z + params.b * x * y,
        ),
        axis=-1,
    )


def lorenz84(params: SystemParams) -> Callable[[StateVector], StateVector]:
    """Bind ``lorenz84_rhs`` to fixed parameters for use with ``integrate``.

    The returned callable is shape generic: it accepts a single state of
    shape (3,) or a stack of shape (n, 3).
    """
    a, b, f1, f2 = params.a, params.b, params.f1, params.f2
    af1 = a * f1

    def rhs(state: StateVector) -> StateVector:
        x, y, z = state[..., 0], state[..., 1], state[..., 2]
        return np.stack(
            (
                -a * x - y * y - z * z + af1,
                -y + x * y - b * x * z + f2,
                -z + x * z + b * x * y,
            ),
            axis=-1,
        )

    return rhs


# Dormand-Prince 5(4) tableau, Hairer/Norsett/Wanner volume 1 notation.
_A21 = 1 / 5
_A31, _A32 = 3 / 40, 9 / 40
_A41, _A42, _A43 = 44 / 45, -56 / 15, 32 / 9
_A51, _A52, _A53, _A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
_A61, _A62, _A63, _A64, _A65 = (
    9017 / 3168,
    -355 / 33,
    46732 / 5247,
    49 / 176,
    -5103 / 18656,
)
_B1, _B3, _B4, _B5, _B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
# difference between the 5th order weights and the embedded 4th order ones
_E1, _E3, _E4, _E5, _E6, _E7 = (
    71 / 57600,
    -71 / 16695,
    71 / 1920,
    -17253 / 339200,
    22 / 525,
    -1 / 40,
)

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0


def integrate(
    rhs: Callable[[StateVector], StateVector],
    x0: StateVector,
    t0: float,
    t1: float,
    config: IntegratorConfig | None = None,
) -> StateVector:
    """Advance an autonomous ODE from ``t0`` to ``t1``.

    Uses the embedded Dormand-Prince 4(5) pair with FSAL reuse and the
    mixed absolute/relative per-component max error norm from ``config``.

    Parameters
    ----------
    rhs : callable
        Maps a state array to its time derivative. The stepper is shape
        agnostic, so a matrix of stacked states with a matching ``rhs``
        advances the whole stack under one shared step sequence.
    x0 : ndarray
        Initial state at ``t0``.
    t0, t1 : float
        Integration span; ``t1 >= t0`` is required.
    config : IntegratorConfig, optional
        Defaults to ``IntegratorConfig()``.

    Returns
    -------
    ndarray
        State at ``t1``.

    Raises
    ------
    IntegrationError
        If the accepted step would fall below ``config.min_step``, which
        signals either a blow-up or an unreachable tolerance.
    """
    if config is None:
        config = IntegratorConfig()
    if t1 < t0:
        raise ValueError(f"integration backwards in time is not supported ({t0} -> {t1})")
    y = np.asarray(x0, dtype=float).copy()
    if t1 == t0:
        return y

    abs_tol = config.abs_tol
    rel_tol = config.rel_tol
    t = t0
    span = t1 - t0
    h = min(config.initial_step, config.max_step, span)
    k1 = rhs(y)

    while t < t1:
        if h < config.min_step:
            raise IntegrationError(
                f"step size underflow at t={t:.6g} (h={h:.3g} < min_step="
                f"{config.min_step:.3g}); trajectory may be diverging"
            )
        if t + h > t1:
            h = t1 - t

        k2 = rhs(y + h * (_A21 * k1))
        k3 = rhs(y + h * (_A31 * k1 + _A32 * k2))
        k4 = rhs(y + h * (_A41 * k1 + _A42 * k2 + _A43 * k3))
        k5 = rhs(y + h * (_A51 * k1 + _A52 * k2 + _A53 * k3 + _A54 * k4))
        k6 = rhs(y + h * (_A61 * k1 + _A62 * k2 + _A63 * k3 + _A64 * k4 + _A65 * k5))
        y_new = y + h * (_B1 * k1 + _B3 * k3 + _B4 * k4 + _B5 * k5 + _B6 * k6)
        k7 = rhs(y_new)

        err_vec = h * (
            _E1 * k1 + _E3 * k3 + _E4 * k4 + _E5 * k5 + _E6 * k6 + _E7 * k7
        )
        scale = abs_tol + rel_tol * np.maximum(np.abs(y), np.abs(y_new))
        err = float(np.max(np.abs(err_vec) / scale))

        if not math.isfinite(err):
            # a stage evaluation overflowed; shrink hard and retry
            h *= _MIN_FACTOR
            continue
        if err <= 1.0:
            t += h
            y = y_new
            k1 = k7  # first-same-as-last
            factor = _MAX_FACTOR if err == 0.0 else min(
                _MAX_FACTOR, max(_MIN_FACTOR, _SAFETY * err ** -0.2)
            )
            h = min(h * factor, config.max_step)
        else:
            h *= max(_MIN_FACTOR, _SAFETY * err ** -0.2)

    return y


def propagate_ensemble(
    rhs: Callable[[StateVector], StateVector],
    states: np.ndarray,
    t0: float,
    t1: float,
    config: IntegratorConfig | None = None,
    vectorized: bool = False,
) -> np.ndarray:
    """Integrate every row of ``states`` from ``t0`` to ``t1``.

    With ``vectorized=False`` this is a pure map over ensemble members:
    member ``i`` of the result is exactly
    ``integrate(rhs, states[i], t0, t1, config)``, in order, so it is
    reproducible bit for bit against sequential calls.

    With ``vectorized=True`` the whole stack is advanced through one
    shared adaptive step sequence (``rhs`` must accept an (n, d) array).
    The error test then takes the max norm over the entire ensemble, so
    accuracy per member is at least that of the scalar path, but the
    step sequence (and hence the rounding) differs from it.
    """
    states = np.asarray(states, dtype=float)
    if states.ndim != 2:
        raise ValueError(f"expected a 2-d ensemble array, got shape {states.shape}")
    if vectorized:
        return integrate(rhs, states, t0, t1, config)
    out = np.empty_like(states)
    for i in range(states.shape[0]):
        out[i] = integrate(rhs, states[i], t0, t1, config)
    return out
