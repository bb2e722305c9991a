'''
Position/velocity extended Kalman filter fed with network predictions as
pseudo-GPS fixes.

The state is (p, v) in the local ENU frame of a geodetic origin.  Attitude
comes from the log and is not estimated.  Between fixes the filter dead
reckons with the specific force of a synthetic IMU; a fix is the network
prediction converted to geodetic coordinates, converted back to ENU by the
filter and applied with a Joseph-form update on the position block.

When the network is fed its own predictions, its error is a random walk:
every step adds the one-step error on top of the previous one.  With the
default `fix_noise = 'random-walk'` the sigma of a fix therefore grows as
gps_sigma * sqrt(n), n being the number of steps since the network was
last given a position it did not predict itself.
'''

import logging
import math
from dataclasses import dataclass, field
from typing import IO, Any, Dict, List, Optional, Protocol, Union

import numpy as np
import pandas as pd
from scipy.signal import savgol_filter

from snmnn import flightlog
from snmnn.custom_exceptions import ConfigValidationError, DatasetError, GeodesyError, RangeError
from snmnn.flightlog import FLOAT_FORMAT, FlightLog, quat_to_rotation
from snmnn.geodesy import GeodeticCoord, enu_to_geodetic_array, geodetic_to_enu_array

logger = logging.getLogger(__name__)

GRAVITY = 9.81
E3 = np.array([0.0, 0.0, 1.0])
SIGMA_CAP = 1e12
FEEDBACK_MODES = ('prediction', 'fused')
FIX_NOISE_MODES = ('random-walk', 'white')
POSITION = slice(0, 3)


class Predictor(Protocol):
    def predict_position(self, p):
        # type: (np.ndarray) -> np.ndarray
        ...

    def reset_memory(self):
        # type: () -> Any
        ...


@dataclass
class EkfState:
    p_hat: np.ndarray
    v_hat: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        # type: () -> None
        self.p_hat = np.asarray(self.p_hat, dtype=float)
        self.v_hat = np.asarray(self.v_hat, dtype=float)
        self.P = np.asarray(self.P, dtype=float)

    @classmethod
    def initial(cls, position, velocity=None, position_sigma=1.0, velocity_sigma=1.0):
        # type: (np.ndarray, Optional[np.ndarray], float, float) -> EkfState
        P = np.diag([position_sigma ** 2] * 3 + [velocity_sigma ** 2] * 3)
        return cls(p_hat=np.array(position, dtype=float),
                   v_hat=np.zeros(3) if velocity is None else np.array(velocity, dtype=float),
                   P=P)

    @property
    def x(self):
        # type: () -> np.ndarray
        return np.concatenate([self.p_hat, self.v_hat])

    def copy(self):
        # type: () -> EkfState
        return EkfState(self.p_hat.copy(), self.v_hat.copy(), self.P.copy())

    def is_healthy(self, symmetry_tol=1e-10, psd_tol=1e-9):
        # type: (float, float) -> bool
        '''P symmetric and positive semidefinite within tolerance.'''
        if not np.all(np.isfinite(self.P)):
            return False
        scale = max(1.0, float(np.max(np.abs(self.P))))
        if np.max(np.abs(self.P - self.P.T)) > symmetry_tol * scale:
            return False
        smallest = float(np.min(np.linalg.eigvalsh(self.P)))
        return smallest >= -psd_tol * max(float(np.trace(self.P)), 1.0)


@dataclass
class ImuSample:
    t: float
    accel_body: np.ndarray
    quat: np.ndarray

    def __post_init__(self):
        # type: () -> None
        self.accel_body = np.asarray(self.accel_body, dtype=float)
        self.quat = np.asarray(self.quat, dtype=float)
        if abs(float(np.linalg.norm(self.quat)) - 1.0) > 1e-6:
            raise RangeError('IMU quaternion is not unit norm')


@dataclass
class GpsMeasurement:
    t: float
    zeta: GeodeticCoord
    sigma: Union[float, np.ndarray]

    def __post_init__(self):
        # type: () -> None
        sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), (3,))
        if np.any(np.isnan(sigma)) or np.any(sigma <= 0.0):
            raise ConfigValidationError('measurement sigma must be positive, got {!r}'.format(
                self.sigma))

    @property
    def sigma_vector(self):
        # type: () -> np.ndarray
        sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), (3,))
        return np.minimum(sigma, SIGMA_CAP)


@dataclass
class UpdateResult:
    state: EkfState
    accepted: bool
    innovation: np.ndarray
    nis: float = math.nan
    reason: Optional[str] = None

    @property
    def gated(self):
        # type: () -> bool
        return not self.accepted and bool(self.reason) and 'gate' in self.reason


def transition(dt):
    # type: (float) -> np.ndarray
    F = np.eye(6)
    F[0:3, 3:6] = dt * np.eye(3)
    return F


def process_noise(dt, accel_sigma):
    # type: (float, float) -> np.ndarray
    '''Discrete white-noise-acceleration covariance for the double integrator.'''
    G = np.vstack([0.5 * dt * dt * np.eye(3), dt * np.eye(3)])
    return accel_sigma ** 2 * (G @ G.T)


def _symmetrize(P):
    # type: (np.ndarray) -> np.ndarray
    return 0.5 * (P + P.T)


def predict(s, imu, dt, q_process, gravity=GRAVITY):
    # type: (EkfState, ImuSample, float, np.ndarray, float) -> EkfState
    '''Constant-acceleration propagation over dt with the IMU's world acceleration.'''
    if not 0.0 < dt <= 0.1:
        raise ConfigValidationError('dt must lie in (0, 0.1], got {!r}'.format(dt))
    accel = quat_to_rotation(imu.quat).apply(imu.accel_body) - gravity * E3
    F = transition(dt)
    return EkfState(p_hat=s.p_hat + dt * s.v_hat + 0.5 * dt * dt * accel,
                    v_hat=s.v_hat + dt * accel,
                    P=_symmetrize(F @ s.P @ F.T + q_process))


def update_position(s, z, sigma, gate=5.0):
    # type: (EkfState, np.ndarray, Union[float, np.ndarray], Optional[float]) -> UpdateResult
    '''Kalman update with an ENU position fix; H = [I 0], R = diag(sigma^2).'''
    z = np.asarray(z, dtype=float)
    innovation = z - s.p_hat
    if not np.all(np.isfinite(innovation)):
        return UpdateResult(s, False, innovation, reason='non-finite innovation')
    sigma = np.minimum(np.broadcast_to(np.asarray(sigma, dtype=float), (3,)), SIGMA_CAP)
    R = np.diag(sigma * sigma)
    S = s.P[POSITION, POSITION] + R
    if gate is not None and np.any(np.abs(innovation) > gate * np.sqrt(np.diag(S))):
        return UpdateResult(s, False, innovation, reason='outside the {:g} sigma gate'.format(gate))

    PHt = s.P[:, POSITION]
    K = np.linalg.solve(S, PHt.T).T
    x = s.x + K @ innovation
    I_KH = np.eye(6)
    I_KH[:, POSITION] -= K
    P = _symmetrize(I_KH @ s.P @ I_KH.T + K @ R @ K.T)
    nis = float(innovation @ np.linalg.solve(S, innovation))
    return UpdateResult(EkfState(x[0:3], x[3:6], P), True, innovation, nis)


def update_gps(s, z, origin, gate=5.0):
    # type: (EkfState, GpsMeasurement, GeodeticCoord, Optional[float]) -> UpdateResult
    try:
        enu = geodetic_to_enu_array(z.zeta.as_array(), origin)[0]
    except GeodesyError as e:
        return UpdateResult(s, False, np.full(3, math.nan), reason=str(e))
    return update_position(s, enu, z.sigma_vector, gate)


@dataclass
class FusionConfig:
    imu_rate_hz: float = 100.0
    gps_rate_hz: float = 10.0
    # One-step sigma of a fix; see fix_noise for how it grows.
    gps_sigma_m: float = 0.05
    fix_noise: str = 'random-walk'
    # Floor of the process acceleration sigma; the synthetic IMU noise
    # raises it when larger.
    accel_process_sigma: float = 0.002
    imu_noise_sigma: float = 0.0
    gate_sigma: float = 5.0
    # Consecutive gated fixes after which the next one skips the gate;
    # 0 never skips.
    max_rejections: int = 10
    feedback: str = 'prediction'
    seed: int = 0
    savgol_window: int = 51
    savgol_order: int = 3
    initial_position_sigma: float = 0.1
    initial_velocity_sigma: float = 0.1
    gravity: float = GRAVITY

    def validate(self):
        # type: () -> FusionConfig
        for name in ('imu_rate_hz', 'gps_rate_hz', 'gps_sigma_m', 'accel_process_sigma',
                     'gate_sigma', 'initial_position_sigma', 'initial_velocity_sigma'):
            value = getattr(self, name)
            if not value > 0.0:
                raise ConfigValidationError('{} must be positive, got {!r}'.format(name, value))
        if self.imu_noise_sigma < 0.0:
            raise ConfigValidationError('imu_noise_sigma must be nonnegative')
        if self.max_rejections < 0:
            raise ConfigValidationError('max_rejections must be nonnegative, got {!r}'.format(
                self.max_rejections))
        ratio = self.imu_rate_hz / self.gps_rate_hz
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigValidationError('gps rate {} Hz must divide the IMU rate {} Hz'.format(
                self.gps_rate_hz, self.imu_rate_hz))
        if self.feedback not in FEEDBACK_MODES:
            raise ConfigValidationError('feedback must be one of {}, got {!r}'.format(
                ', '.join(FEEDBACK_MODES), self.feedback))
        if self.fix_noise not in FIX_NOISE_MODES:
            raise ConfigValidationError('fix_noise must be one of {}, got {!r}'.format(
                ', '.join(FIX_NOISE_MODES), self.fix_noise))
        if self.savgol_window < 3 or self.savgol_window % 2 == 0:
            raise ConfigValidationError('savgol_window must be odd and at least 3')
        if not 2 <= self.savgol_order < self.savgol_window:
            raise ConfigValidationError('savgol_order must lie in [2, savgol_window)')
        return self

    @property
    def gps_every(self):
        # type: () -> int
        return int(round(self.imu_rate_hz / self.gps_rate_hz))

    @property
    def process_sigma(self):
        # type: () -> float
        return max(self.accel_process_sigma, self.imu_noise_sigma)

    def fix_sigma(self, free_steps):
        # type: (int) -> float
        '''Sigma of a fix made `free_steps` steps after the network was last anchored.'''
        if self.fix_noise == 'white':
            return self.gps_sigma_m
        return self.gps_sigma_m * math.sqrt(max(free_steps, 1))


def model_fix_sigma(net):
    # type: (Any) -> Optional[float]
    '''Per-axis one-step sigma implied by a model's held-out RMSE, if it has one.'''
    rmse = getattr(net, 'holdout_rmse', math.nan)
    if not (math.isfinite(rmse) and rmse > 0.0):
        return None
    return rmse / math.sqrt(3.0)


@dataclass
class FusionReport:
    t: np.ndarray
    truth: np.ndarray
    pred: np.ndarray
    fused: np.ndarray
    rmse_pred: float
    rmse_fused: float
    rejected_count: int
    update_count: int
    nis_mean: float
    feedback: str
    gate_resets: int = 0
    source: Optional[str] = None
    rejections: List[str] = field(default_factory=list)

    def frame(self):
        # type: () -> pd.DataFrame
        columns = {'t': self.t}
        for prefix, block in (('truth', self.truth), ('pred', self.pred), ('fused', self.fused)):
            for index, axis in enumerate('xyz'):
                columns['{}_{}'.format(prefix, axis)] = block[:, index]
        return pd.DataFrame(columns)

    def summary(self):
        # type: () -> Dict[str, Any]
        return {'rmse_pred': self.rmse_pred,
                'rmse_fused': self.rmse_fused,
                'rejected_count': self.rejected_count,
                'update_count': self.update_count,
                'gate_resets': self.gate_resets,
                'nis_mean': self.nis_mean,
                'feedback': self.feedback}

    def write_csv(self, path_or_buffer):
        # type: (Union[str, IO[str]]) -> None
        '''The time series followed by a '#'-prefixed key=value summary block.'''
        table = self.frame().to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
        lines = [table]
        for key, value in self.summary().items():
            text = FLOAT_FORMAT % value if isinstance(value, float) else str(value)
            lines.append('# {}={}\n'.format(key, text))
        content = ''.join(lines)
        if isinstance(path_or_buffer, str):
            with open(path_or_buffer, 'w', encoding='utf-8', newline='\n') as f:
                f.write(content)
        else:
            path_or_buffer.write(content)


def read_report_summary(path):
    # type: (str) -> Dict[str, str]
    summary = {}
    with open(path, encoding='utf-8') as f:
        for line in f:
            if line.startswith('#') and '=' in line:
                key, value = line[1:].strip().split('=', 1)
                summary[key.strip()] = value.strip()
    return summary


def _rmse(a, b):
    # type: (np.ndarray, np.ndarray) -> float
    errors = a - b
    value = math.sqrt(float(np.mean(np.sum(errors * errors, axis=1))))
    return value if math.isfinite(value) else math.inf


def _savgol_window(n, cfg):
    # type: (int, FusionConfig) -> int
    # largest odd window that fits in the log
    return min(cfg.savgol_window, n if n % 2 else n - 1)


def _fuse_prediction(state, y, t, origin, sigma, gate):
    # type: (EkfState, np.ndarray, float, GeodeticCoord, float, Optional[float]) -> UpdateResult
    if not np.all(np.isfinite(y)):
        return UpdateResult(state, False, y - state.p_hat, reason='non-finite prediction')
    try:
        zeta = GeodeticCoord(*enu_to_geodetic_array(y, origin)[0])
    except GeodesyError as e:
        return UpdateResult(state, False, y - state.p_hat, reason=str(e))
    return update_gps(state, GpsMeasurement(t, zeta, sigma), origin, gate)


def synthesize_imu(log, cfg):
    # type: (FlightLog, FusionConfig) -> np.ndarray
    '''
    Body-frame specific force from the twice-differentiated logged
    positions (Savitzky-Golay), plus optional white noise.
    '''
    n = len(log)
    window = _savgol_window(n, cfg)
    if window <= cfg.savgol_order:
        raise DatasetError('{}: {} samples are too few to synthesize IMU data'.format(log.source, n))
    dt = 1.0 / cfg.imu_rate_hz
    accel_world = savgol_filter(log.position, window, cfg.savgol_order, deriv=2, delta=dt,
                                axis=0, mode='interp')
    specific_force = quat_to_rotation(log.quat).inv().apply(accel_world + cfg.gravity * E3)
    if cfg.imu_noise_sigma > 0.0:
        rng = np.random.default_rng(cfg.seed)
        specific_force = specific_force + rng.normal(0.0, cfg.imu_noise_sigma, size=specific_force.shape)
    return specific_force


def replay(log, net, origin, cfg=None):
    # type: (FlightLog, Predictor, GeodeticCoord, Optional[FusionConfig]) -> FusionReport
    '''
    Runs the network every IMU step, feeding it its own previous
    prediction (or the fused estimate), and fuses every gps_every-th
    prediction into the filter.  A non-finite prediction is rejected and
    the fused estimate is fed back instead.  After max_rejections fixes
    in a row fell outside the gate, the next fix is applied ungated.
    '''
    cfg = (cfg or FusionConfig()).validate()
    log = flightlog.resample(log, cfg.imu_rate_hz)
    n = len(log)
    dt = 1.0 / cfg.imu_rate_hz
    specific_force = synthesize_imu(log, cfg)
    initial_velocity = savgol_filter(log.position, _savgol_window(n, cfg), cfg.savgol_order,
                                     deriv=1, delta=dt, axis=0, mode='interp')[0]
    q_process = process_noise(dt, cfg.process_sigma)

    state = EkfState.initial(log.position[0], initial_velocity,
                             cfg.initial_position_sigma, cfg.initial_velocity_sigma)
    net.reset_memory()
    pred = np.empty((n, 3))
    fused = np.empty((n, 3))
    pred[0] = log.position[0]
    fused[0] = state.p_hat
    feedback = log.position[0].copy()
    free_steps = 0
    gated_in_row = 0
    gate_resets = 0
    rejections = []  # type: List[str]
    nis = []  # type: List[float]

    for k in range(1, n):
        state = predict(state, ImuSample(log.t[k - 1], specific_force[k - 1], log.quat[k - 1]),
                        dt, q_process, cfg.gravity)
        y = np.asarray(net.predict_position(np.concatenate([feedback, log.omega_bar[k],
                                                            log.quat[k]])), dtype=float)
        pred[k] = y
        free_steps += 1
        finite = bool(np.all(np.isfinite(y)))
        if k % cfg.gps_every == 0:
            gate = cfg.gate_sigma  # type: Optional[float]
            if cfg.max_rejections and gated_in_row >= cfg.max_rejections:
                gate = None
                gate_resets += 1
                logger.debug('%d fixes in a row outside the gate, applying t=%.3f ungated',
                             gated_in_row, log.t[k])
            result = _fuse_prediction(state, y, log.t[k], origin, cfg.fix_sigma(free_steps), gate)
            if result.accepted:
                state = result.state
                nis.append(result.nis)
                gated_in_row = 0
            else:
                gated_in_row = gated_in_row + 1 if result.gated else 0
                rejections.append('t={:.3f}: {}'.format(log.t[k], result.reason))
                logger.debug('Rejected fix at t=%.3f: %s', log.t[k], result.reason)
        fused[k] = state.p_hat
        if cfg.feedback == 'fused' or not finite:
            feedback = state.p_hat.copy()
            free_steps = 0
        else:
            feedback = y

    report = FusionReport(t=log.t, truth=log.position, pred=pred, fused=fused,
                          rmse_pred=_rmse(pred[1:], log.position[1:]),
                          rmse_fused=_rmse(fused[1:], log.position[1:]),
                          rejected_count=len(rejections),
                          update_count=len(nis),
                          nis_mean=float(np.mean(nis)) if nis else math.nan,
                          feedback=cfg.feedback,
                          gate_resets=gate_resets,
                          source=log.source,
                          rejections=rejections)
    logger.info('Replayed %s: RMSE pred %.4g m, fused %.4g m, %d fix(es) rejected, %d gate reset(s)',
                log.source, report.rmse_pred, report.rmse_fused, report.rejected_count,
                report.gate_resets)
    return report
