'''
Flight logs: parsing, writing, resampling and splitting into datasets.

A log is a UTF-8 CSV file with LF line endings and the header

    t,w1,w2,w3,w4,x,y,z,qw,qx,qy,qz

t in seconds (strictly increasing), w1..w4 rotor speeds normalized by the
maximum rotor speed, x, y, z the ENU position in meters and qw..qz the
unit body-to-world quaternion.
'''

import logging
from dataclasses import dataclass, field
from typing import IO, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial.transform import Rotation, Slerp

from snmnn.custom_exceptions import (
    DatasetError,
    DimensionError,
    FlightLogError,
    MalformedValueError,
    MissingColumnError,
    NonMonotonicTimeError,
    RangeError,
    ResampleError,
)

logger = logging.getLogger(__name__)

TIME_COLUMN = 't'
RPM_COLUMNS = ['w1', 'w2', 'w3', 'w4']
POSITION_COLUMNS = ['x', 'y', 'z']
QUAT_COLUMNS = ['qw', 'qx', 'qy', 'qz']
COLUMNS = [TIME_COLUMN] + RPM_COLUMNS + POSITION_COLUMNS + QUAT_COLUMNS

DEFAULT_RATE_HZ = 100.0
DEFAULT_SPLIT = (3, 2)
DEFAULT_SEGMENT_LEN = 500
QUAT_NORM_TOLERANCE = 1e-6
FLOAT_FORMAT = '%.12g'

# Header occupies line 1, so data row i sits on line i + 2.
_FIRST_DATA_LINE = 2


@dataclass
class FlightLog:
    t: np.ndarray
    omega_bar: np.ndarray
    position: np.ndarray
    quat: np.ndarray
    source: Optional[str] = None

    def __post_init__(self):
        # type: () -> None
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        n = self.t.shape[0]
        self.omega_bar = _rows('omega_bar', self.omega_bar, n, 4)
        self.position = _rows('position', self.position, n, 3)
        self.quat = _rows('quat', self.quat, n, 4)

    def __len__(self):
        # type: () -> int
        return self.t.shape[0]

    @property
    def duration(self):
        # type: () -> float
        return float(self.t[-1] - self.t[0]) if len(self) else 0.0

    @property
    def native_rate(self):
        # type: () -> float
        '''Mean sample rate in Hz.'''
        if len(self) < 2 or self.duration <= 0.0:
            return 0.0
        return (len(self) - 1) / self.duration

    def validate(self):
        # type: () -> FlightLog
        check_finite(self)
        check_monotonic(self)
        check_ranges(self)
        return self

    def to_frame(self):
        # type: () -> pd.DataFrame
        data = np.hstack([self.t[:, np.newaxis], self.omega_bar, self.position, self.quat])
        return pd.DataFrame(data, columns=COLUMNS)

    @classmethod
    def from_frame(cls, frame, source=None):
        # type: (pd.DataFrame, Optional[str]) -> FlightLog
        return cls(t=frame[TIME_COLUMN].to_numpy(dtype=float),
                   omega_bar=frame[RPM_COLUMNS].to_numpy(dtype=float),
                   position=frame[POSITION_COLUMNS].to_numpy(dtype=float),
                   quat=frame[QUAT_COLUMNS].to_numpy(dtype=float),
                   source=source)


def _rows(name, values, n, width):
    # type: (str, np.ndarray, int, int) -> np.ndarray
    array = np.asarray(values, dtype=float)
    if array.ndim != 2 or array.shape[1] != width:
        raise DimensionError(name, width, array.shape[-1] if array.ndim else 0)
    if array.shape[0] != n:
        raise DimensionError('{} rows'.format(name), n, array.shape[0])
    return array


def _line(row):
    # type: (int) -> int
    return row + _FIRST_DATA_LINE


def check_finite(log):
    # type: (FlightLog) -> None
    for name, block, columns in (('t', log.t[:, np.newaxis], [TIME_COLUMN]),
                                 ('omega_bar', log.omega_bar, RPM_COLUMNS),
                                 ('position', log.position, POSITION_COLUMNS),
                                 ('quat', log.quat, QUAT_COLUMNS)):
        bad = np.argwhere(~np.isfinite(block))
        if bad.size:
            row, col = bad[0]
            raise MalformedValueError('non-finite value', log.source, _line(row), columns[col])


def check_monotonic(log):
    # type: (FlightLog) -> None
    steps = np.diff(log.t)
    bad = np.flatnonzero(steps <= 0.0)
    if bad.size:
        row = bad[0] + 1
        raise NonMonotonicTimeError(
            'timestamp {!r} does not increase on the previous row ({!r})'.format(
                log.t[row], log.t[row - 1]),
            log.source, _line(row), TIME_COLUMN)


def check_ranges(log):
    # type: (FlightLog) -> None
    bad = np.argwhere((log.omega_bar < 0.0) | (log.omega_bar > 1.0))
    if bad.size:
        row, col = bad[0]
        raise RangeError('normalized rotor speed {!r} outside [0, 1]'.format(log.omega_bar[row, col]),
                         log.source, _line(row), RPM_COLUMNS[col])
    norms = np.linalg.norm(log.quat, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > QUAT_NORM_TOLERANCE)
    if bad.size:
        row = bad[0]
        raise RangeError('quaternion norm {!r} is not 1'.format(norms[row]),
                         log.source, _line(row), 'qw..qz')


def parse(path_or_buffer, source=None, raw_rpm_max=None):
    # type: (Union[str, IO[str]], Optional[str], Optional[float]) -> FlightLog
    '''
    Reads and validates a log.  With `raw_rpm_max` the rotor columns are
    taken as raw speeds and divided by it before validation.
    '''
    if source is None:
        source = path_or_buffer if isinstance(path_or_buffer, str) else getattr(
            path_or_buffer, 'name', '<stream>')
    try:
        frame = pd.read_csv(path_or_buffer, dtype=str, keep_default_na=False,
                            skipinitialspace=True, encoding='utf-8')
    except FileNotFoundError:
        raise FlightLogError('file does not exist', source)
    except pd.errors.EmptyDataError:
        raise FlightLogError('file is empty', source)
    except pd.errors.ParserError as e:
        raise MalformedValueError(str(e).strip(), source)

    frame.columns = [str(column).strip() for column in frame.columns]
    missing = [column for column in COLUMNS if column not in frame.columns]
    if missing:
        raise MissingColumnError(missing, source)
    if len(frame) == 0:
        raise FlightLogError('log has no data rows', source)

    numeric = {}
    for column in COLUMNS:
        raw = frame[column].str.strip()
        values = pd.to_numeric(raw, errors='coerce').to_numpy(dtype=float)
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            row = bad[0]
            raise MalformedValueError('{!r} is not a finite number'.format(raw.iloc[row]),
                                      source, _line(row), column)
        numeric[column] = values

    omega_bar = np.column_stack([numeric[column] for column in RPM_COLUMNS])
    if raw_rpm_max is not None:
        if not raw_rpm_max > 0.0:
            raise RangeError('raw_rpm_max must be positive, got {!r}'.format(raw_rpm_max), source)
        omega_bar = omega_bar / raw_rpm_max

    log = FlightLog(t=numeric[TIME_COLUMN],
                    omega_bar=omega_bar,
                    position=np.column_stack([numeric[column] for column in POSITION_COLUMNS]),
                    quat=np.column_stack([numeric[column] for column in QUAT_COLUMNS]),
                    source=source)
    log.validate()
    logger.debug('Parsed %d rows from %s', len(log), source)
    return log


def write(log, path_or_buffer):
    # type: (FlightLog, Union[str, IO[str]]) -> None
    log.to_frame().to_csv(path_or_buffer, index=False, float_format=FLOAT_FORMAT,
                          lineterminator='\n', encoding='utf-8')


def canonical_quat(quat):
    # type: (np.ndarray) -> np.ndarray
    '''Scalar-first quaternions with a nonnegative scalar part.'''
    quat = np.asarray(quat, dtype=float)
    return quat * np.where(quat[..., :1] < 0.0, -1.0, 1.0)


def quat_to_rotation(quat):
    # type: (np.ndarray) -> Rotation
    quat = np.asarray(quat, dtype=float)
    return Rotation.from_quat(quat[..., [1, 2, 3, 0]])


def rotation_to_quat(rotation):
    # type: (Rotation) -> np.ndarray
    return canonical_quat(rotation.as_quat()[..., [3, 0, 1, 2]])


def resample(log, rate_hz=DEFAULT_RATE_HZ):
    # type: (FlightLog, float) -> FlightLog
    '''
    Resamples onto the uniform grid t0 + k / rate_hz.  Positions and rotor
    speeds are interpolated linearly, quaternions by slerp.  Grid points
    that coincide with a source timestamp take the source row exactly.
    '''
    n = len(log)
    if n < 2:
        raise ResampleError('resampling needs at least 2 samples, got {}'.format(n))
    if not (np.isfinite(rate_hz) and rate_hz > 0.0):
        raise ResampleError('sample rate must be positive, got {!r}'.format(rate_hz))
    native = log.native_rate
    if rate_hz > native * (1.0 + 1e-9):
        raise ResampleError('requested rate {:g} Hz exceeds the native rate {:g} Hz'.format(
            rate_hz, native))

    t0, t_end = log.t[0], log.t[-1]
    count = int(np.floor((t_end - t0) * rate_hz + 1e-9)) + 1
    grid = t0 + np.arange(count) / rate_hz
    # Snap the last grid point onto the final timestamp when it lands on it.
    if abs(grid[-1] - t_end) <= 1e-9:
        grid[-1] = t_end
    grid = np.minimum(grid, t_end)

    omega_bar = np.column_stack([np.interp(grid, log.t, log.omega_bar[:, i]) for i in range(4)])
    position = np.column_stack([np.interp(grid, log.t, log.position[:, i]) for i in range(3)])
    quat = rotation_to_quat(Slerp(log.t, quat_to_rotation(log.quat))(grid))

    source_index = np.clip(np.searchsorted(log.t, grid, side='right') - 1, 0, n - 1)
    flip = np.einsum('ij,ij->i', quat, log.quat[source_index]) < 0.0
    quat[flip] *= -1.0

    exact = log.t[source_index] == grid
    omega_bar[exact] = log.omega_bar[source_index[exact]]
    position[exact] = log.position[source_index[exact]]
    quat[exact] = log.quat[source_index[exact]]

    logger.debug('Resampled %s from %d to %d rows at %g Hz', log.source, n, count, rate_hz)
    return FlightLog(t=grid, omega_bar=omega_bar, position=position, quat=quat, source=log.source)


def input_rows(log):
    # type: (FlightLog) -> np.ndarray
    '''
    Network inputs for every one-step-ahead pair of the log: row k-1
    holds (position[k-1], omega_bar[k], quat[k]) for k = 1..N-1.
    '''
    return np.hstack([log.position[:-1], log.omega_bar[1:], log.quat[1:]])


@dataclass
class Segment:
    '''A contiguous run of (input, target) pairs from one log.'''
    inputs: np.ndarray
    targets: np.ndarray
    times: np.ndarray
    source: Optional[str] = None
    start: int = 0

    def __len__(self):
        # type: () -> int
        return self.inputs.shape[0]

    def pairs(self):
        # type: () -> Iterator[Tuple[np.ndarray, np.ndarray]]
        return zip(self.inputs, self.targets)


@dataclass
class DatasetMeta:
    sources: List[Optional[str]]
    sample_rate: float
    split: Tuple[int, int]
    seed: int
    segment_len: int


@dataclass
class Dataset:
    train: List[Segment] = field(default_factory=list)
    test: List[Segment] = field(default_factory=list)
    meta: Optional[DatasetMeta] = None

    @property
    def train_samples(self):
        # type: () -> int
        return sum(len(segment) for segment in self.train)

    @property
    def test_samples(self):
        # type: () -> int
        return sum(len(segment) for segment in self.test)


def log_segment(log, start=0, stop=None):
    # type: (FlightLog, int, Optional[int]) -> Segment
    '''Pairs [start, stop) of a log as one segment.'''
    inputs = input_rows(log)
    stop = inputs.shape[0] if stop is None else stop
    return Segment(inputs=inputs[start:stop],
                   targets=log.position[1 + start:1 + stop],
                   times=log.t[1 + start:1 + stop],
                   source=log.source,
                   start=start)


def build_dataset(logs, split=DEFAULT_SPLIT, seed=0, segment_len=DEFAULT_SEGMENT_LEN):
    # type: (Sequence[FlightLog], Tuple[int, int], int, int) -> Dataset
    '''
    Cuts every log into contiguous chunks of `segment_len` pairs, shuffles
    the chunks with `seed` and fills the training split until it holds
    round(n * train / (train + test)) of the log's n pairs.  The chunk that
    crosses the target is cut in two, so no segment spans the split.
    '''
    if not logs:
        raise DatasetError('no flight logs given')
    train_part, test_part = split
    if train_part <= 0 or test_part <= 0:
        raise DatasetError('split parts must be positive, got {}:{}'.format(train_part, test_part))
    if segment_len < 1:
        raise DatasetError('segment length must be positive, got {}'.format(segment_len))

    rng = np.random.default_rng(seed)
    dataset = Dataset(meta=DatasetMeta(sources=[log.source for log in logs],
                                       sample_rate=logs[0].native_rate,
                                       split=(train_part, test_part),
                                       seed=seed,
                                       segment_len=segment_len))
    for log in logs:
        pairs = len(log) - 1
        if pairs < 2:
            raise DatasetError('{}: {} samples are too few to split'.format(log.source, len(log)))
        target_train = int(round(pairs * train_part / float(train_part + test_part)))
        target_train = min(max(target_train, 1), pairs - 1)

        bounds = [(start, min(start + segment_len, pairs)) for start in range(0, pairs, segment_len)]
        needed = target_train
        train_pieces = []
        test_pieces = []
        for index in rng.permutation(len(bounds)):
            start, stop = bounds[index]
            size = stop - start
            if needed >= size:
                train_pieces.append((start, stop))
                needed -= size
            elif needed > 0:
                train_pieces.append((start, start + needed))
                test_pieces.append((start + needed, stop))
                needed = 0
            else:
                test_pieces.append((start, stop))

        dataset.train.extend(log_segment(log, start, stop) for (start, stop) in sorted(train_pieces))
        dataset.test.extend(log_segment(log, start, stop) for (start, stop) in sorted(test_pieces))

    logger.info('Dataset: %d train / %d test samples in %d / %d segments',
                dataset.train_samples, dataset.test_samples, len(dataset.train), len(dataset.test))
    return dataset


def slice_log(log, start, stop):
    # type: (FlightLog, int, int) -> FlightLog
    return FlightLog(t=log.t[start:stop], omega_bar=log.omega_bar[start:stop],
                     position=log.position[start:stop], quat=log.quat[start:stop], source=log.source)


class LogRun(NamedTuple):
    '''Rows [start, stop) of a log.'''
    start: int
    stop: int
    log: FlightLog


def held_out_logs(logs, dataset, min_rows=2):
    # type: (Sequence[FlightLog], Dataset, int) -> List[LogRun]
    '''
    The test split of `dataset` as flight logs.  Adjacent test segments of
    one log are merged; a run of n pairs covers rows start..start+n of its
    log, so it can be replayed from a known first position.  Runs shorter
    than `min_rows` rows are dropped.
    '''
    by_source = {log.source: log for log in logs}
    runs = []  # type: List[Tuple[Optional[str], int, int]]
    for segment in dataset.test:
        stop = segment.start + len(segment)
        if runs and runs[-1][0] == segment.source and runs[-1][2] == segment.start:
            runs[-1] = (segment.source, runs[-1][1], stop)
        else:
            runs.append((segment.source, segment.start, stop))

    held_out = []  # type: List[LogRun]
    for source, start, stop in runs:
        if source not in by_source:
            raise DatasetError('no flight log for test segment source {!r}'.format(source))
        if stop + 1 - start < min_rows:
            logger.debug('Dropping %d-row test run of %s', stop + 1 - start, source)
            continue
        held_out.append(LogRun(start, stop + 1, slice_log(by_source[source], start, stop + 1)))
    return held_out
