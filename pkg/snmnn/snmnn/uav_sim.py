'''
Rigid-body quadrotor simulator used to generate synthetic flight logs.

Frames: the world frame is ENU (z up), the body frame is FLU (x forward,
y left, z up) and R maps body vectors to world vectors.  The dynamics are

    x' = v
    m v' = -m g e3 + R e3 f_t + f~
    R' = R hat(Omega)
    J Omega' = tau + tau~ - Omega x J Omega

with f_t = K_omega * sum(w_i^2) and

    tau_x = K_omega l (w3^2 - w1^2)
    tau_y = K_omega l (w4^2 - w2^2)
    tau_z = K_d (w2^2 + w4^2 - w1^2 - w3^2)

These torques fix a "+" layout: rotor 1 on the -y arm, 2 on +x, 3 on +y,
4 on -x.  Rotors 2 and 4 spin clockwise seen from above (their drag
reaction is +z), rotors 1 and 3 counter-clockwise.

              +x (front)
                 2
                 |
     +y (left) 3 -+- 1
                 |
                 4
'''

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from snmnn.custom_exceptions import (
    ConfigValidationError,
    ControllerDivergenceError,
    RotorSpeedError,
    SimulationError,
)
from snmnn.flightlog import FlightLog, rotation_to_quat

logger = logging.getLogger(__name__)

E3 = np.array([0.0, 0.0, 1.0])
PLAN_KINDS = ('hover', 'square', 'circle', 'random')

DEFAULT_DT = 1e-3
DEFAULT_LOG_RATE_HZ = 100.0
DEFAULT_DIVERGENCE_BOUND_M = 5.0
# Seconds over which the circle plan ramps up to its cruise speed.
CIRCLE_RAMP_S = 2.0
MAX_TILT_RAD = math.radians(35.0)


@dataclass
class UavParams:
    m: float = 1.1
    J: np.ndarray = field(default_factory=lambda: np.diag([5.0e-3, 5.0e-3, 9.0e-3]))
    l: float = 0.125
    K_omega: float = 1.726e-6
    K_d: float = 2.5e-8
    g: float = 9.81
    omega_max: float = 2500.0

    def __post_init__(self):
        # type: () -> None
        self.J = np.asarray(self.J, dtype=float)
        for name in ('m', 'l', 'K_omega', 'K_d', 'g', 'omega_max'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0.0):
                raise ConfigValidationError('{} must be positive, got {!r}'.format(name, value))
        if self.J.shape != (3, 3) or not np.allclose(self.J, self.J.T):
            raise ConfigValidationError('J must be a symmetric 3x3 matrix')
        if np.min(np.linalg.eigvalsh(self.J)) <= 0.0:
            raise ConfigValidationError('J must be positive definite')

    @property
    def hover_omega(self):
        # type: () -> float
        return math.sqrt(self.m * self.g / (4.0 * self.K_omega))

    def allocation(self):
        # type: () -> np.ndarray
        '''Maps squared rotor speeds to (f_t, tau_x, tau_y, tau_z).'''
        k, kl, kd = self.K_omega, self.K_omega * self.l, self.K_d
        return np.array([[k, k, k, k],
                         [-kl, 0.0, kl, 0.0],
                         [0.0, -kl, 0.0, kl],
                         [-kd, kd, -kd, kd]])


@dataclass
class UavState:
    x: np.ndarray
    v: np.ndarray
    R: np.ndarray
    Omega: np.ndarray

    def __post_init__(self):
        # type: () -> None
        self.x = np.asarray(self.x, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.Omega = np.asarray(self.Omega, dtype=float)

    @classmethod
    def at_rest(cls, position=None):
        # type: (Optional[np.ndarray]) -> UavState
        return cls(x=np.zeros(3) if position is None else position, v=np.zeros(3),
                   R=np.eye(3), Omega=np.zeros(3))

    @property
    def quat(self):
        # type: () -> np.ndarray
        '''Scalar-first unit quaternion of R with a nonnegative scalar part.'''
        return rotation_to_quat(Rotation.from_matrix(self.R))

    def is_finite(self):
        # type: () -> bool
        return bool(np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.v)) and
                    np.all(np.isfinite(self.R)) and np.all(np.isfinite(self.Omega)))


@dataclass
class DisturbanceModel:
    '''
    Steady wind force plus a sum of horizontal sinusoidal gusts, and a
    small sinusoidal torque.  Outputs are clipped to the configured caps.
    '''
    steady_force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gust_amplitude: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    gust_frequency: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gust_phase: np.ndarray = field(default_factory=lambda: np.zeros(0))
    torque_amplitude: np.ndarray = field(default_factory=lambda: np.zeros(3))
    torque_frequency: float = 0.0
    force_cap: float = 2.0
    torque_cap: float = 0.05

    @classmethod
    def none(cls):
        # type: () -> DisturbanceModel
        return cls()

    @classmethod
    def wind(cls, seed=0, steady=0.15, gust=0.1, torque=1e-3, components=3):
        # type: (int, float, float, float, int) -> DisturbanceModel
        rng = np.random.default_rng(seed)
        heading = rng.uniform(0.0, 2.0 * math.pi)
        amplitude = np.zeros((components, 3))
        amplitude[:, 0:2] = rng.uniform(-1.0, 1.0, size=(components, 2)) * gust / components
        return cls(steady_force=steady * np.array([math.cos(heading), math.sin(heading), 0.0]),
                   gust_amplitude=amplitude,
                   gust_frequency=rng.uniform(0.1, 1.0, size=components),
                   gust_phase=rng.uniform(0.0, 2.0 * math.pi, size=components),
                   torque_amplitude=rng.uniform(-torque, torque, size=3),
                   torque_frequency=rng.uniform(0.2, 0.5))

    def f_tilde(self, t):
        # type: (float) -> np.ndarray
        waves = np.sin(2.0 * math.pi * self.gust_frequency * t + self.gust_phase)
        return _clip_norm(self.steady_force + waves @ self.gust_amplitude, self.force_cap)

    def tau_tilde(self, t):
        # type: (float) -> np.ndarray
        wave = math.sin(2.0 * math.pi * self.torque_frequency * t)
        return _clip_norm(self.torque_amplitude * wave, self.torque_cap)

    def __call__(self, t):
        # type: (float) -> Tuple[np.ndarray, np.ndarray]
        return self.f_tilde(t), self.tau_tilde(t)


def _clip_norm(vector, cap):
    # type: (np.ndarray, float) -> np.ndarray
    norm = np.linalg.norm(vector)
    if norm > cap:
        return vector * (cap / norm)
    return vector


def hat(w):
    # type: (np.ndarray) -> np.ndarray
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def vee(M):
    # type: (np.ndarray) -> np.ndarray
    return np.array([M[2, 1], M[0, 2], M[1, 0]])


def orthonormalize(R):
    # type: (np.ndarray) -> np.ndarray
    '''Gram-Schmidt on the columns of R.'''
    c1 = R[:, 0] / np.linalg.norm(R[:, 0])
    c2 = R[:, 1] - (c1 @ R[:, 1]) * c1
    c2 /= np.linalg.norm(c2)
    return np.column_stack([c1, c2, np.cross(c1, c2)])


def thrust_torque(omega, params):
    # type: (np.ndarray, UavParams) -> Tuple[float, np.ndarray]
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (4,) or not np.all(np.isfinite(omega)):
        raise RotorSpeedError('rotor speeds must be 4 finite values, got {!r}'.format(omega))
    if np.any(omega < 0.0) or np.any(omega > params.omega_max):
        raise RotorSpeedError('rotor speeds {} outside [0, {}] rad/s'.format(
            omega.tolist(), params.omega_max))
    w2 = omega * omega
    f_t = params.K_omega * float(np.sum(w2))
    tau = np.array([params.K_omega * params.l * (w2[2] - w2[0]),
                    params.K_omega * params.l * (w2[3] - w2[1]),
                    params.K_d * (w2[1] + w2[3] - w2[0] - w2[2])])
    return f_t, tau


def mixer(f_t, tau, params):
    # type: (float, np.ndarray, UavParams) -> np.ndarray
    '''Rotor speeds producing (f_t, tau), saturated to [0, omega_max].'''
    wrench = np.concatenate([[f_t], tau])
    w2 = np.linalg.solve(params.allocation(), wrench)
    return np.sqrt(np.clip(w2, 0.0, params.omega_max ** 2))


def _derivative(t, x, v, R, Omega, f_t, tau, params, disturbance):
    # type: (float, np.ndarray, np.ndarray, np.ndarray, np.ndarray, float, np.ndarray, UavParams, DisturbanceModel) -> Tuple[np.ndarray, ...]
    f_ext, tau_ext = disturbance(t)
    v_dot = (-params.m * params.g * E3 + R[:, 2] * f_t + f_ext) / params.m
    R_dot = R @ hat(Omega)
    Omega_dot = np.linalg.solve(params.J, tau + tau_ext - np.cross(Omega, params.J @ Omega))
    return v, v_dot, R_dot, Omega_dot


def step(state, omega, params, disturbance=None, dt=DEFAULT_DT, t=0.0, step_index=0):
    # type: (UavState, np.ndarray, UavParams, Optional[DisturbanceModel], float, float, int) -> UavState
    '''One RK4 step with rotor speeds held over [t, t + dt].'''
    if not 0.0 < dt <= 0.1:
        raise ConfigValidationError('dt must lie in (0, 0.1], got {!r}'.format(dt))
    if disturbance is None:
        disturbance = DisturbanceModel.none()
    f_t, tau = thrust_torque(omega, params)

    def deriv(time, y):
        # type: (float, Tuple[np.ndarray, ...]) -> Tuple[np.ndarray, ...]
        return _derivative(time, y[0], y[1], y[2], y[3], f_t, tau, params, disturbance)

    y0 = (state.x, state.v, state.R, state.Omega)
    k1 = deriv(t, y0)
    k2 = deriv(t + 0.5 * dt, tuple(a + 0.5 * dt * b for (a, b) in zip(y0, k1)))
    k3 = deriv(t + 0.5 * dt, tuple(a + 0.5 * dt * b for (a, b) in zip(y0, k2)))
    k4 = deriv(t + dt, tuple(a + dt * b for (a, b) in zip(y0, k3)))
    x, v, R, Omega = (a + dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
                      for (a, b1, b2, b3, b4) in zip(y0, k1, k2, k3, k4))

    nxt = UavState(x=x, v=v, R=R, Omega=Omega)
    if not nxt.is_finite():
        raise SimulationError(step_index)
    nxt.R = orthonormalize(nxt.R)
    if not nxt.is_finite():
        raise SimulationError(step_index, 'degenerate rotation')
    return nxt


@dataclass
class NoiseConfig:
    '''Additive Gaussian noise on logged positions, per axis.'''
    sigma_m: float = 0.01
    seed: int = 0

    def validate(self):
        # type: () -> NoiseConfig
        if not (math.isfinite(self.sigma_m) and self.sigma_m >= 0.0):
            raise ConfigValidationError('noise_sigma_m must be nonnegative, got {!r}'.format(
                self.sigma_m))
        return self


def _min_jerk(u):
    # type: (float) -> Tuple[float, float, float]
    '''Position, velocity and acceleration of the quintic 0 -> 1 blend.'''
    u2 = u * u
    return (u2 * u * (10.0 - 15.0 * u + 6.0 * u2),
            30.0 * u2 * (1.0 - u) ** 2,
            60.0 * u * (1.0 - u) * (1.0 - 2.0 * u))


class _WaypointPath(object):
    def __init__(self, waypoints, leg_times):
        # type: (List[np.ndarray], List[float]) -> None
        self.waypoints = waypoints
        self.leg_times = leg_times
        self.starts = np.concatenate([[0.0], np.cumsum(leg_times)])

    def __call__(self, t):
        # type: (float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]
        leg = int(np.searchsorted(self.starts, t, side='right')) - 1
        if leg >= len(self.leg_times):
            return self.waypoints[-1].copy(), np.zeros(3), np.zeros(3)
        leg = max(leg, 0)
        T = self.leg_times[leg]
        a, b = self.waypoints[leg], self.waypoints[leg + 1]
        s, ds, dds = _min_jerk((t - self.starts[leg]) / T)
        return a + (b - a) * s, (b - a) * ds / T, (b - a) * dds / (T * T)


@dataclass
class TrajectoryPlan:
    kind: str = 'hover'
    duration_s: float = 30.0
    radius_m: float = 2.0
    side_m: float = 4.0
    altitude_m: float = 2.0
    speed_mps: float = 1.0
    extent_m: float = 3.0
    seed: int = 0
    offset: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    wind: bool = False

    def validate(self):
        # type: () -> TrajectoryPlan
        if self.kind not in PLAN_KINDS:
            raise ConfigValidationError('plan must be one of {}, got {!r}'.format(
                ', '.join(PLAN_KINDS), self.kind))
        for name in ('duration_s', 'radius_m', 'side_m', 'speed_mps', 'extent_m'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0.0):
                raise ConfigValidationError('{} must be positive, got {!r}'.format(name, value))
        if not math.isfinite(self.altitude_m):
            raise ConfigValidationError('altitude_m must be finite')
        if len(self.offset) != 3 or not all(math.isfinite(value) for value in self.offset):
            raise ConfigValidationError('offset must be three finite numbers')
        return self

    @property
    def center(self):
        # type: () -> np.ndarray
        return np.asarray(self.offset, dtype=float) + self.altitude_m * E3

    @property
    def name(self):
        # type: () -> str
        return '{}-seed{}'.format(self.kind, self.seed)

    def reference(self):
        # type: () -> Callable[[float], Tuple[np.ndarray, np.ndarray, np.ndarray]]
        '''Returns t -> (position, velocity, acceleration) of the plan.'''
        center = self.center
        if self.kind == 'hover':
            return lambda t: (center.copy(), np.zeros(3), np.zeros(3))
        if self.kind == 'circle':
            return self._circle(center)
        if self.kind == 'square':
            half = 0.5 * self.side_m
            corners = [center + np.array([sx * half, sy * half, 0.0])
                       for (sx, sy) in ((-1, -1), (1, -1), (1, 1), (-1, 1))]
            leg_time = self.side_m / self.speed_mps
            legs = int(math.ceil(self.duration_s / leg_time)) + 1
            waypoints = [corners[i % 4] for i in range(legs + 1)]
            return _WaypointPath(waypoints, [leg_time] * legs)

        rng = np.random.default_rng(self.seed)
        waypoints = [center]
        leg_times = []  # type: List[float]
        while sum(leg_times) < self.duration_s + 1.0:
            target = center + np.array([rng.uniform(-self.extent_m, self.extent_m),
                                        rng.uniform(-self.extent_m, self.extent_m),
                                        rng.uniform(-0.5, 0.5)])
            leg_times.append(max(2.0, float(np.linalg.norm(target - waypoints[-1])) / self.speed_mps))
            waypoints.append(target)
        return _WaypointPath(waypoints, leg_times)

    def _circle(self, center):
        # type: (np.ndarray) -> Callable[[float], Tuple[np.ndarray, np.ndarray, np.ndarray]]
        rate = self.speed_mps / self.radius_m
        ramp = CIRCLE_RAMP_S
        radius = self.radius_m

        def reference(t):
            # type: (float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]
            if t < ramp:
                u = t / ramp
                theta = rate * ramp * (u ** 3 - 0.5 * u ** 4)
                theta_dot = rate * (3.0 * u * u - 2.0 * u ** 3)
                theta_ddot = rate * (6.0 * u - 6.0 * u * u) / ramp
            else:
                theta = rate * (0.5 * ramp + (t - ramp))
                theta_dot = rate
                theta_ddot = 0.0
            radial = np.array([math.cos(theta), math.sin(theta), 0.0])
            tangent = np.array([-math.sin(theta), math.cos(theta), 0.0])
            return (center + radius * radial,
                    radius * theta_dot * tangent,
                    radius * theta_ddot * tangent - radius * theta_dot ** 2 * radial)

        return reference


@dataclass
class ControllerGains:
    kp: float = 6.0
    kd: float = 4.5
    k_R: float = 400.0
    k_Omega: float = 36.0


def desired_attitude(accel_cmd, yaw=0.0):
    # type: (np.ndarray, float) -> np.ndarray
    b3 = accel_cmd / np.linalg.norm(accel_cmd)
    heading = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    b2 = np.cross(b3, heading)
    b2 /= np.linalg.norm(b2)
    return np.column_stack([np.cross(b2, b3), b2, b3])


def _limit_tilt(accel_cmd, g):
    # type: (np.ndarray, float) -> np.ndarray
    vertical = max(accel_cmd[2], 0.2 * g)
    horizontal = accel_cmd[0:2]
    limit = vertical * math.tan(MAX_TILT_RAD)
    norm = np.linalg.norm(horizontal)
    if norm > limit:
        horizontal = horizontal * (limit / norm)
    return np.array([horizontal[0], horizontal[1], vertical])


def control(state, reference, params, gains):
    # type: (UavState, Tuple[np.ndarray, np.ndarray, np.ndarray], UavParams, ControllerGains) -> np.ndarray
    '''Cascaded PD: position loop -> desired attitude -> attitude PD -> mixer.'''
    p_ref, v_ref, a_ref = reference
    accel_cmd = (a_ref + gains.kp * (p_ref - state.x) + gains.kd * (v_ref - state.v) +
                 params.g * E3)
    accel_cmd = _limit_tilt(accel_cmd, params.g)
    R_d = desired_attitude(accel_cmd)
    f_t = params.m * float(accel_cmd @ state.R[:, 2])

    e_R = 0.5 * vee(R_d.T @ state.R - state.R.T @ R_d)
    e_Omega = state.Omega
    tau = (params.J @ (-gains.k_R * e_R - gains.k_Omega * e_Omega) +
           np.cross(state.Omega, params.J @ state.Omega))
    return mixer(max(f_t, 0.0), tau, params)


def generate_flight(plan, params=None, noise=None, dt=DEFAULT_DT, log_rate_hz=DEFAULT_LOG_RATE_HZ,
                    divergence_bound_m=DEFAULT_DIVERGENCE_BOUND_M, gains=None, disturbance=None):
    # type: (TrajectoryPlan, Optional[UavParams], Optional[NoiseConfig], float, float, float, Optional[ControllerGains], Optional[DisturbanceModel]) -> FlightLog
    '''
    Flies `plan` in closed loop and logs (t, omega/omega_max, position,
    quaternion) at `log_rate_hz`.  The logged rotor speeds of a row are the
    ones applied over the interval that ended at that row's timestamp.
    '''
    plan.validate()
    params = params or UavParams()
    noise = (noise or NoiseConfig(sigma_m=0.0)).validate()
    gains = gains or ControllerGains()
    if disturbance is None:
        disturbance = DisturbanceModel.wind(seed=plan.seed) if plan.wind else DisturbanceModel.none()
    if not 0.0 < dt <= 0.1:
        raise ConfigValidationError('dt must lie in (0, 0.1], got {!r}'.format(dt))
    decimation = int(round(1.0 / (dt * log_rate_hz)))
    if decimation < 1 or abs(decimation * dt * log_rate_hz - 1.0) > 1e-9:
        raise ConfigValidationError('log rate {} Hz is not a divisor of the physics rate {} Hz'.format(
            log_rate_hz, 1.0 / dt))

    reference = plan.reference()
    n_steps = int(round(plan.duration_s / dt))
    p0, v0, a0 = reference(0.0)
    state = UavState(x=p0, v=v0, R=desired_attitude(a0 + params.g * E3), Omega=np.zeros(3))
    rng = np.random.default_rng(noise.seed)

    rows = []
    omega_prev = None  # type: Optional[np.ndarray]
    for k in range(n_steps + 1):
        t = k * dt
        ref = reference(t)
        omega = control(state, ref, params, gains)
        if k % decimation == 0:
            applied = omega if omega_prev is None else omega_prev
            rows.append((t, applied / params.omega_max, state.x.copy(), state.quat))
        if k == n_steps:
            break
        state = step(state, omega, params, disturbance, dt, t, k)
        omega_prev = omega
        error = float(np.linalg.norm(state.x - reference(t + dt)[0]))
        if error > divergence_bound_m:
            raise ControllerDivergenceError('tracking error {:.3f} m exceeds {} m at step {}'.format(
                error, divergence_bound_m, k + 1))

    position = np.array([row[2] for row in rows])
    if noise.sigma_m > 0.0:
        position = position + rng.normal(0.0, noise.sigma_m, size=position.shape)
    log = FlightLog(t=np.array([row[0] for row in rows]),
                    omega_bar=np.clip(np.array([row[1] for row in rows]), 0.0, 1.0),
                    position=position,
                    quat=np.array([row[3] for row in rows]),
                    source=plan.name)
    logger.info('Simulated %s: %.1f s, %d rows', plan.name, plan.duration_s, len(log))
    return log


SUITE_DURATION_S = 60.0
STRESS_OFFSET_M = (60.0, -40.0, 30.0)


def fixture_suite(duration_s=SUITE_DURATION_S, stress=False):
    # type: (float, bool) -> List[TrajectoryPlan]
    '''
    The standard fixture flights: hover, square, circle and two random
    waypoint flights, all in mild wind.  The stress variant flies the same
    plans far from the origin.
    '''
    offset = STRESS_OFFSET_M if stress else (0.0, 0.0, 0.0)
    kinds = [('hover', 1), ('square', 2), ('circle', 3), ('random', 4), ('random', 5)]
    return [TrajectoryPlan(kind=kind, duration_s=duration_s, seed=seed, offset=offset, wind=True)
            for (kind, seed) in kinds]
