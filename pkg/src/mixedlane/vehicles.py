"""Vehicle state types, dynamics models, and fixed-step RK4 integration.

Three dynamics models live here: the kinematic bicycle used by the
controlled vehicles, the disturbed bicycle driven by the (simulated)
human, and the adaptive estimate of the human vehicle that the
controller maintains when the true dynamics are hidden from it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence


class VehicleState(NamedTuple):
    """Pose and speed: longitudinal x [m], lateral y [m], heading [rad], speed [m/s]."""

    x: float
    y: float
    theta: float
    v: float


class ControlInput(NamedTuple):
    """Acceleration u [m/s^2] and steering angle phi [rad]."""

    u: float
    phi: float


class AdaptiveTerms(NamedTuple):
    """Additive correction terms of the adaptive human-vehicle model.

    All four are zero at the start of a maneuver; synchronization events
    accumulate measured error rates into them.
    """

    h_x: float = 0.0
    h_y: float = 0.0
    h_theta: float = 0.0
    h_v: float = 0.0


class ErrorVector(NamedTuple):
    """Componentwise state error (true minus estimated); also used for error rates."""

    e_x: float = 0.0
    e_y: float = 0.0
    e_theta: float = 0.0
    e_v: float = 0.0


class DisturbanceSample(NamedTuple):
    """One draw of the multiplicative and additive disturbance processes."""

    sigma1: float = 1.0
    sigma2: float = 1.0
    eps1: float = 0.0
    eps2: float = 0.0
    eps3: float = 0.0
    eps4: float = 0.0


NEUTRAL_DISTURBANCE = DisturbanceSample()

StateDerivative = tuple  # (dx, dy, dtheta, dv)

DEFAULT_SIGMA_RANGE = (0.9, 1.1)
DEFAULT_EPS_RANGES = ((-0.7, 0.7), (-0.5, 0.5), (-0.5, 0.5), (-0.7, 0.7))


@dataclass(frozen=True)
class DisturbanceConfig:
    """Uniform disturbance intervals for the true human-vehicle dynamics.

    sigma_range scales the longitudinal/lateral drift multiplicatively;
    eps_ranges are additive per state-derivative component. A fixed seed
    gives a bit-identical sample sequence.
    """

    sigma_range: tuple[float, float] = DEFAULT_SIGMA_RANGE
    eps_ranges: tuple[tuple[float, float], ...] = DEFAULT_EPS_RANGES
    seed: int | None = None

    def __post_init__(self):
        lo, hi = self.sigma_range
        if lo > hi:
            raise ValueError("sigma_range must be ordered (lo <= hi)")
        if len(self.eps_ranges) != 4:
            raise ValueError("eps_ranges must have four intervals")
        for lo, hi in self.eps_ranges:
            if lo > hi:
                raise ValueError("eps_ranges intervals must be ordered")

    @classmethod
    def off(cls, seed: int | None = None) -> "DisturbanceConfig":
        """Degenerate config whose every sample is the neutral disturbance."""
        return cls(sigma_range=(1.0, 1.0),
                   eps_ranges=((0.0, 0.0),) * 4, seed=seed)


def sample_disturbance(cfg: DisturbanceConfig, rng) -> DisturbanceSample:
    """Draw one disturbance sample (6 uniform variates, in a fixed order)."""
    s_lo, s_hi = cfg.sigma_range
    sigma1 = rng.uniform(s_lo, s_hi)
    sigma2 = rng.uniform(s_lo, s_hi)
    eps = [rng.uniform(lo, hi) for lo, hi in cfg.eps_ranges]
    return DisturbanceSample(sigma1, sigma2, eps[0], eps[1], eps[2], eps[3])


def cav_derivative(state: VehicleState, control: ControlInput,
                   wheelbase: float) -> StateDerivative:
    """Kinematic bicycle: returns (dx, dy, dtheta, dv) for a controlled vehicle."""
    x, y, theta, v = state
    u, phi = control
    c = math.cos(theta)
    s = math.sin(theta)
    return (v * c - v * s * phi,
            v * s + v * c * phi,
            (v / wheelbase) * phi,
            u)


def hdv_disturbed_derivative(state: VehicleState, control: ControlInput,
                             sample: DisturbanceSample,
                             wheelbase: float) -> StateDerivative:
    """True human-vehicle dynamics under a fixed disturbance sample.

    The multiplicative factors scale only the drift; the control columns
    match the bicycle model. Hidden from the controller unless a run is
    configured with the human model known.
    """
    x, y, theta, v = state
    u, phi = control
    c = math.cos(theta)
    s = math.sin(theta)
    return (v * c * sample.sigma1 - v * s * phi + sample.eps1,
            v * s * sample.sigma2 + v * c * phi + sample.eps2,
            (v / wheelbase) * phi + sample.eps3,
            u + sample.eps4)


def hdv_true_derivative(state: VehicleState, control: ControlInput,
                        cfg: DisturbanceConfig, rng,
                        wheelbase: float = 2.7) -> StateDerivative:
    """Disturbed human-vehicle derivative with a fresh sample drawn per call."""
    return hdv_disturbed_derivative(state, control,
                                    sample_disturbance(cfg, rng), wheelbase)


def hdv_adaptive_derivative(est_state: VehicleState, terms: AdaptiveTerms,
                            wheelbase: float) -> StateDerivative:
    """Controller-side adaptive model of the human vehicle.

    Control-free: the human's inputs are absorbed into the additive terms.
    Note the heading rate is v/L_w plus its correction term, with no
    steering factor; the h_theta term carries whatever that form misses.
    """
    x, y, theta, v = est_state
    return (v * math.cos(theta) + terms.h_x,
            v * math.sin(theta) + terms.h_y,
            v / wheelbase + terms.h_theta,
            terms.h_v)


def integrate_step(state: VehicleState,
                   derivative_provider: Callable[[VehicleState], StateDerivative],
                   dt: float) -> VehicleState:
    """Classic RK4 advance by one micro-step.

    The provider must be deterministic over the step: disturbance samples
    are held constant within a micro-step, so all four stages see the
    same realization.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x, y, th, v = state
    k1 = derivative_provider(state)
    h2 = 0.5 * dt
    k2 = derivative_provider(VehicleState(x + h2 * k1[0], y + h2 * k1[1],
                                          th + h2 * k1[2], v + h2 * k1[3]))
    k3 = derivative_provider(VehicleState(x + h2 * k2[0], y + h2 * k2[1],
                                          th + h2 * k2[2], v + h2 * k2[3]))
    k4 = derivative_provider(VehicleState(x + dt * k3[0], y + dt * k3[1],
                                          th + dt * k3[2], v + dt * k3[3]))
    w = dt / 6.0
    return VehicleState(x + w * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
                        y + w * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
                        th + w * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
                        v + w * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3]))


def measure_error(true_state: VehicleState, est_state: VehicleState) -> ErrorVector:
    """Direct measurement error, componentwise true minus estimated."""
    return ErrorVector(true_state.x - est_state.x,
                       true_state.y - est_state.y,
                       true_state.theta - est_state.theta,
                       true_state.v - est_state.v)


def measure_error_rate(true_rate: StateDerivative,
                       est_rate: StateDerivative) -> ErrorVector:
    """Error rate: sensed true state derivative minus adaptive-model derivative."""
    return ErrorVector(true_rate[0] - est_rate[0],
                       true_rate[1] - est_rate[1],
                       true_rate[2] - est_rate[2],
                       true_rate[3] - est_rate[3])


def synchronize_adaptive_model(
        terms: AdaptiveTerms,
        error_dot_history: Sequence[ErrorVector],
        true_state: VehicleState) -> tuple[AdaptiveTerms, VehicleState]:
    """Fold pending error rates into the adaptive terms and reset the estimate.

    ``error_dot_history`` holds the error rates measured at update instants
    that have not yet been incorporated (in the running loop that is exactly
    one entry per event). The estimated state is reset to the measured true
    state, so the state error is exactly zero afterwards and the post-update
    error rate is near zero.
    """
    hx, hy, ht, hv = terms
    for e in error_dot_history:
        hx += e[0]
        hy += e[1]
        ht += e[2]
        hv += e[3]
    return AdaptiveTerms(hx, hy, ht, hv), true_state
