'''
Memory neuron network (MNN) with spectral weight normalization.

Every layer pairs each network neuron with a memory neuron.  At time
step k, layer l first advances its memory

    r_k = alpha * n_{k-1} + (1 - alpha) * r_{k-1}

and then computes

    n_k = phi(W x_k + Q r_k)

where x_k is the output of the previous layer (the network input for the
first layer), phi is tanh for hidden layers and the identity for the
output layer.  Rescaling every W and every Q, each on its own, to the
spectral norm gamma**(1/L) bounds the Lipschitz constant of one step
(memory held fixed) by gamma.

The network output is read in one of two ways.  In position mode it is
the predicted position itself.  In velocity mode it is the mean velocity
over the next step, and the predicted position is

    y_k = y_{k-1} + dt * f(p_k)

with y_{k-1} the position part of the input.  Velocities are of order one
in m/s, which suits unit-norm layers far better than absolute positions
of a few meters.

A network is single-writer: `forward` mutates the memory state, so one
instance must not be shared by concurrent callers.  Use `copy()` to hand
an independent clone to another thread or process.

Model file layout
-----------------

All integers are unsigned little-endian unless noted, all floats
little-endian IEEE-754 doubles, matrices are stored row-major:

    magic          4 bytes   b'SNMN'
    format_version u32       currently 2 (version 1 files are still read)
    gamma          f64
    input_dim      u32
    output_dim     u32
    layer_count    u32
    output_mode    u8        0 = position, 1 = velocity       (version 2)
    output_dt      f64       seconds per step in velocity mode (version 2)
    has_seed       u8        1 if split_seed is set           (version 2)
    split_seed     u64       seed of the train/test split     (version 2)
    segment_len    u32       chunk length of that split, 0 if
                             unknown                           (version 2)
    holdout_rmse   f64       one-step RMSE on the held-out split in meters,
                             NaN if unknown                    (version 2)
    layer table    layer_count x (in_dim u32, out_dim u32, activation u8)
                   activation tag: 0 = tanh, 1 = linear
    payload        for every layer in order:
                   W (out_dim x in_dim f64), Q (out_dim x out_dim f64),
                   alpha (out_dim f64)

The stream ends right after the last alpha; trailing bytes are an error.
'''

import copy
import enum
import logging
import math
import struct
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from snmnn.custom_exceptions import (
    ConfigValidationError,
    DimensionError,
    ModelDimensionError,
    ModelFormatError,
    ModelVersionError,
    NumericalError,
    RangeError,
    TruncatedModelError,
)

logger = logging.getLogger(__name__)

INPUT_DIM = 11
OUTPUT_DIM = 3
QUAT_NORM_TOLERANCE = 1e-6

# Gram matrices up to this size are decomposed exactly.
PI_EXACT_DIM = 16
# Columns of the block iterated on larger Gram matrices.
PI_BLOCK = 2
# Stop once |G v - theta v| <= PI_TOLERANCE * theta for the top Ritz pair.
PI_TOLERANCE = 1e-10
PI_MAX_ITER = 200
# Matrices with a spectral norm below this are left unscaled.
DEAD_WEIGHT = 1e-12

FORMAT_VERSION = 2
_MAGIC = b'SNMN'
_HEADER = struct.Struct('<4sIdIII')
_HEADER_V2 = struct.Struct('<BdBQId')
_LAYER_ENTRY = struct.Struct('<IIB')

ArrayLike = Union[np.ndarray, Sequence[float]]


class Activation(enum.Enum):
    TANH = 0
    LINEAR = 1

    def apply(self, z):
        # type: (np.ndarray) -> np.ndarray
        if self is Activation.TANH:
            return np.tanh(z)
        return z

    def derivative(self, n):
        # type: (np.ndarray) -> np.ndarray
        '''Derivative of phi expressed through its output n = phi(z).'''
        if self is Activation.TANH:
            return 1.0 - n * n
        return np.ones_like(n)


class OutputMode(enum.Enum):
    POSITION = 0
    VELOCITY = 1

    @property
    def label(self):
        # type: () -> str
        return self.name.lower()

    @classmethod
    def from_label(cls, label):
        # type: (str) -> OutputMode
        try:
            return cls[label.upper()]
        except KeyError:
            raise ConfigValidationError('unknown output mode {!r}'.format(label))


class InputVector(object):
    '''
    The network input p_k: previous position (m), normalized rotor
    speeds in [0, 1] and the unit orientation quaternion (w, x, y, z).
    '''

    def __init__(self, prev_position, rpm_normalized, orientation):
        # type: (ArrayLike, ArrayLike, ArrayLike) -> None
        self.prev_position = _vector('prev_position', prev_position, 3)
        self.rpm_normalized = _vector('rpm_normalized', rpm_normalized, 4)
        self.orientation = _vector('orientation', orientation, 4)
        if np.any(self.rpm_normalized < 0.0) or np.any(self.rpm_normalized > 1.0):
            raise RangeError('normalized rotor speeds must lie in [0, 1], got {}'.format(
                self.rpm_normalized.tolist()))
        norm = float(np.linalg.norm(self.orientation))
        if abs(norm - 1.0) > QUAT_NORM_TOLERANCE:
            raise RangeError('orientation quaternion has norm {!r}, expected 1'.format(norm))

    def as_array(self):
        # type: () -> np.ndarray
        return np.concatenate([self.prev_position, self.rpm_normalized, self.orientation])

    @classmethod
    def from_array(cls, values):
        # type: (ArrayLike) -> InputVector
        values = _vector('input vector', values, INPUT_DIM)
        return cls(values[0:3], values[3:7], values[7:11])

    def __repr__(self):
        # type: () -> str
        return 'InputVector(prev_position={}, rpm_normalized={}, orientation={})'.format(
            self.prev_position.tolist(), self.rpm_normalized.tolist(), self.orientation.tolist())


class _LayerTrace(NamedTuple):
    x: np.ndarray
    r: np.ndarray
    n: np.ndarray
    n_prev: np.ndarray
    r_prev: np.ndarray


class MnnLayer(object):
    def __init__(self, W, Q, alpha=0.5, activation=Activation.TANH):
        # type: (ArrayLike, ArrayLike, Union[float, ArrayLike], Activation) -> None
        W = np.array(W, dtype=float)
        Q = np.array(Q, dtype=float)
        if W.ndim != 2:
            raise ModelDimensionError('W must be a matrix, got shape {}'.format(W.shape))
        out_dim = W.shape[0]
        if Q.shape != (out_dim, out_dim):
            raise ModelDimensionError('Q must be {0}x{0}, got shape {1}'.format(out_dim, Q.shape))
        alpha = np.array(np.broadcast_to(np.asarray(alpha, dtype=float), (out_dim,)))
        if np.any(~np.isfinite(alpha)) or np.any(alpha < 0.0) or np.any(alpha > 1.0):
            raise ModelFormatError('memory feedback weights alpha must lie in [0, 1]')

        self.W = W
        self.Q = Q
        self.alpha = alpha
        self.activation = activation
        self.n_state = np.zeros(out_dim)
        self.r_state = np.zeros(out_dim)
        self.trace = None  # type: Optional[_LayerTrace]
        # Dominant singular blocks of the last normalization, reused as
        # warm starts while training.
        self._pi_start = {'W': None, 'Q': None}  # type: dict

    @property
    def in_dim(self):
        # type: () -> int
        return self.W.shape[1]

    @property
    def out_dim(self):
        # type: () -> int
        return self.W.shape[0]

    def step_memory(self):
        # type: () -> np.ndarray
        self.r_state = self.alpha * self.n_state + (1.0 - self.alpha) * self.r_state
        return self.r_state

    def forward(self, x):
        # type: (np.ndarray) -> np.ndarray
        n_prev = self.n_state
        r_prev = self.r_state
        r = self.step_memory()
        n = self.activation.apply(self.W @ x + self.Q @ r)
        self.n_state = n
        self.trace = _LayerTrace(x, r, n, n_prev, r_prev)
        return n

    def reset_memory(self):
        # type: () -> None
        self.n_state = np.zeros(self.out_dim)
        self.r_state = np.zeros(self.out_dim)
        self.trace = None

    def normalize_spectral(self, target, warm=False):
        # type: (float, bool) -> None
        '''Scales W and Q independently so that each has spectral norm `target`.'''
        for name in ('W', 'Q'):
            matrix = getattr(self, name)
            start = self._pi_start[name] if warm else None
            rho, block = power_iteration(matrix, start=start)
            self._pi_start[name] = block
            if rho < DEAD_WEIGHT:
                continue
            setattr(self, name, matrix * (target / rho))


class MnnNetwork(object):
    def __init__(self, layers, gamma=1.0, output_mode=OutputMode.POSITION, output_dt=1.0):
        # type: (Sequence[MnnLayer], float, OutputMode, float) -> None
        if not layers:
            raise ModelDimensionError('a network needs at least one layer')
        if not (math.isfinite(gamma) and gamma > 0.0):
            raise ConfigValidationError('gamma must be a positive number, got {!r}'.format(gamma))
        for index in range(1, len(layers)):
            if layers[index].in_dim != layers[index - 1].out_dim:
                raise ModelDimensionError(
                    'layer {} takes {} inputs but layer {} produces {}'.format(
                        index + 1, layers[index].in_dim, index, layers[index - 1].out_dim))
        if layers[-1].activation is not Activation.LINEAR:
            raise ModelFormatError('the output layer must be linear')
        if any(layer.activation is not Activation.TANH for layer in layers[:-1]):
            raise ModelFormatError('hidden layers must use tanh')
        self.layers = list(layers)
        self.gamma = float(gamma)
        self.output_mode = OutputMode.POSITION
        self.output_dt = 1.0
        self.set_output(output_mode, output_dt)
        # Filled in by training: the seed and chunk length of the train/test
        # split and the one-step RMSE on its held-out part.
        self.split_seed = None  # type: Optional[int]
        self.split_segment_len = 0
        self.holdout_rmse = math.nan

    @property
    def input_dim(self):
        # type: () -> int
        return self.layers[0].in_dim

    @property
    def output_dim(self):
        # type: () -> int
        return self.layers[-1].out_dim

    @property
    def depth(self):
        # type: () -> int
        return len(self.layers)

    @property
    def layer_target(self):
        # type: () -> float
        '''Spectral norm every W and Q is scaled to: gamma ** (1 / L).'''
        return self.gamma ** (1.0 / self.depth)

    def set_output(self, mode, dt=1.0):
        # type: (OutputMode, float) -> MnnNetwork
        if mode is OutputMode.VELOCITY:
            if not (math.isfinite(dt) and dt > 0.0):
                raise ConfigValidationError('output_dt must be positive, got {!r}'.format(dt))
            if self.output_dim != 3 or self.input_dim < 3:
                raise ModelDimensionError('velocity output needs 3 outputs and a position input')
        self.output_mode = mode
        self.output_dt = float(dt) if mode is OutputMode.VELOCITY else 1.0
        return self

    def forward(self, p):
        # type: (Union[InputVector, ArrayLike]) -> np.ndarray
        x = self._input_array(p)
        for layer in self.layers:
            x = layer.forward(x)
        return x.copy()

    def predict_position(self, p):
        # type: (Union[InputVector, ArrayLike]) -> np.ndarray
        '''One step: the position predicted for p, whatever the output mode.'''
        x = self._input_array(p)
        return self.to_position(x, self.forward(x))

    def to_position(self, inputs, outputs):
        # type: (np.ndarray, np.ndarray) -> np.ndarray
        '''Turns raw outputs (one row per input row) into positions.'''
        if self.output_mode is OutputMode.VELOCITY:
            return inputs[..., 0:3] + self.output_dt * outputs
        return outputs

    def output_target(self, inputs, positions):
        # type: (np.ndarray, np.ndarray) -> np.ndarray
        '''The raw output that would predict `positions` exactly.'''
        if self.output_mode is OutputMode.VELOCITY:
            return (positions - inputs[..., 0:3]) / self.output_dt
        return positions

    def evaluate_batch(self, inputs):
        # type: (ArrayLike) -> np.ndarray
        '''
        Evaluates every row of `inputs` as if it were the next step from
        the current memory state.  The memory state is left untouched.
        '''
        X = np.asarray(inputs, dtype=float)
        if X.ndim == 1:
            X = X[np.newaxis, :]
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise DimensionError('input batch', self.input_dim, X.shape[-1])
        for layer in self.layers:
            r = layer.alpha * layer.n_state + (1.0 - layer.alpha) * layer.r_state
            X = layer.activation.apply(X @ layer.W.T + layer.Q @ r)
        return X

    def reset_memory(self):
        # type: () -> MnnNetwork
        for layer in self.layers:
            layer.reset_memory()
        return self

    def normalize_spectral(self, warm=False):
        # type: (bool) -> MnnNetwork
        target = self.layer_target
        for layer in self.layers:
            layer.normalize_spectral(target, warm=warm)
        return self

    def spectral_norms(self):
        # type: () -> List[Tuple[float, float]]
        return [(spectral_norm(layer.W), spectral_norm(layer.Q)) for layer in self.layers]

    def memory_snapshot(self):
        # type: () -> List[Tuple[np.ndarray, np.ndarray]]
        return [(layer.n_state.copy(), layer.r_state.copy()) for layer in self.layers]

    def restore_memory(self, snapshot):
        # type: (Sequence[Tuple[np.ndarray, np.ndarray]]) -> None
        for layer, (n_state, r_state) in zip(self.layers, snapshot):
            layer.n_state = n_state.copy()
            layer.r_state = r_state.copy()
            layer.trace = None

    def copy(self):
        # type: () -> MnnNetwork
        return copy.deepcopy(self)

    def weights_finite(self):
        # type: () -> bool
        return all(np.all(np.isfinite(layer.W)) and np.all(np.isfinite(layer.Q)) and
                   np.all(np.isfinite(layer.alpha)) for layer in self.layers)

    def _input_array(self, p):
        # type: (Union[InputVector, ArrayLike]) -> np.ndarray
        if isinstance(p, InputVector):
            x = p.as_array()
        else:
            x = np.asarray(p, dtype=float)
        if x.ndim != 1:
            raise DimensionError('input vector', self.input_dim, x.size)
        if x.shape[0] != self.input_dim:
            raise DimensionError('input vector', self.input_dim, x.shape[0])
        return x


def persistence_network(gamma=1.0):
    # type: (float) -> MnnNetwork
    '''
    The zero-order-hold baseline as a one-layer linear MNN: the predicted
    position is the previous position.
    '''
    W = np.zeros((OUTPUT_DIM, INPUT_DIM))
    W[:, 0:3] = np.eye(3)
    layer = MnnLayer(W, np.zeros((OUTPUT_DIM, OUTPUT_DIM)), alpha=0.5,
                     activation=Activation.LINEAR)
    return MnnNetwork([layer], gamma=gamma)


def _vector(name, values, size):
    # type: (str, ArrayLike, int) -> np.ndarray
    array = np.array(values, dtype=float).ravel()
    if array.shape[0] != size:
        raise DimensionError(name, size, array.shape[0])
    return array


def _start_block(n):
    # type: (int) -> np.ndarray
    block, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((n, min(n, PI_BLOCK))))
    return block


def _exact_top(gram):
    # type: (np.ndarray) -> Tuple[float, np.ndarray]
    values, vectors = np.linalg.eigh(gram)
    return float(values[-1]), vectors[:, ::-1][:, :min(gram.shape[0], PI_BLOCK)]


def power_iteration(M, start=None, tol=PI_TOLERANCE, max_iter=PI_MAX_ITER):
    # type: (ArrayLike, Optional[np.ndarray], float, int) -> Tuple[float, np.ndarray]
    '''
    Largest singular value of M, from the top eigenpair of G, the smaller
    of M^T M and M M^T.

    Gram matrices up to PI_EXACT_DIM rows are decomposed exactly.  Larger
    ones go through block power iteration with a Rayleigh-Ritz step on
    PI_BLOCK columns, which keeps converging when the two largest singular
    values are close or trade places between warm-started calls.  The
    loop stops once the top Ritz pair (theta, v) has |G v - theta v| <=
    tol * theta; without that within max_iter products the exact value
    is used instead.

    Returns (sigma, block); pass the block back as `start` to warm-start
    the next call on a slightly changed matrix.
    '''
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ModelDimensionError('spectral norm needs a matrix, got shape {}'.format(M.shape))
    if not np.all(np.isfinite(M)):
        raise NumericalError('spectral norm of a matrix with non-finite entries')
    rows, cols = M.shape
    right = cols <= rows
    n = min(rows, cols)
    if n == 0:
        return 0.0, np.zeros((0, 0))
    if not np.any(M):
        return 0.0, _start_block(n)
    if n <= PI_EXACT_DIM:
        lam, block = _exact_top(M.T @ M if right else M @ M.T)
        return math.sqrt(max(lam, 0.0)), block

    def apply_gram(V):
        # type: (np.ndarray) -> np.ndarray
        return M.T @ (M @ V) if right else M @ (M.T @ V)

    if start is None or start.ndim != 2 or start.shape[0] != n or not np.any(start):
        block = _start_block(n)
    else:
        block, _ = np.linalg.qr(start)
    for _ in range(max_iter):
        product = apply_gram(block)
        values, vectors = np.linalg.eigh(block.T @ product)
        vectors = vectors[:, ::-1]
        lam = float(values[-1])
        residual = np.linalg.norm(product @ vectors[:, 0] - lam * (block @ vectors[:, 0]))
        if lam > 0.0 and residual <= tol * lam:
            return math.sqrt(lam), block @ vectors
        block, _ = np.linalg.qr(product)
    logger.debug('power iteration did not settle in %d products, using the exact norm', max_iter)
    lam, block = _exact_top(M.T @ M if right else M @ M.T)
    return math.sqrt(max(lam, 0.0)), block


def spectral_norm(M):
    # type: (ArrayLike) -> float
    return power_iteration(M)[0]


class LipschitzAudit(NamedTuple):
    pairs: int
    bound: float
    max_ratio: float
    violations: int


def random_inputs(rng, count, input_dim=INPUT_DIM, position_range=5.0):
    # type: (np.random.Generator, int, int, float) -> np.ndarray
    '''Draws inputs from the valid input box (positions in +-range).'''
    if input_dim != INPUT_DIM:
        return rng.uniform(-position_range, position_range, size=(count, input_dim))
    positions = rng.uniform(-position_range, position_range, size=(count, 3))
    rpm = rng.uniform(0.0, 1.0, size=(count, 4))
    quats = rng.standard_normal((count, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    quats *= np.where(quats[:, :1] < 0.0, -1.0, 1.0)
    return np.hstack([positions, rpm, quats])


def lipschitz_audit(net, pairs=10000, seed=0, position_range=5.0, slack=1e-9, bound=None):
    # type: (MnnNetwork, int, int, float, float, Optional[float]) -> LipschitzAudit
    '''
    Monte-Carlo check of |f(p2) - f(p1)| <= gamma |p2 - p1| for one step
    of the raw network map from its current memory state.
    '''
    if bound is None:
        bound = net.gamma
    rng = np.random.default_rng(seed)
    P1 = random_inputs(rng, pairs, net.input_dim, position_range)
    P2 = random_inputs(rng, pairs, net.input_dim, position_range)
    output_gap = np.linalg.norm(net.evaluate_batch(P2) - net.evaluate_batch(P1), axis=1)
    input_gap = np.linalg.norm(P2 - P1, axis=1)
    violations = int(np.count_nonzero(output_gap > bound * input_gap + slack))
    nonzero = input_gap > 0.0
    max_ratio = float(np.max(output_gap[nonzero] / input_gap[nonzero])) if np.any(nonzero) else 0.0
    return LipschitzAudit(pairs=pairs, bound=bound, max_ratio=max_ratio, violations=violations)


def serialize(net):
    # type: (MnnNetwork) -> bytes
    has_seed = net.split_seed is not None
    parts = [_HEADER.pack(_MAGIC, FORMAT_VERSION, net.gamma, net.input_dim,
                          net.output_dim, len(net.layers)),
             _HEADER_V2.pack(net.output_mode.value, net.output_dt, has_seed,
                             net.split_seed if has_seed else 0, net.split_segment_len,
                             net.holdout_rmse)]
    for layer in net.layers:
        parts.append(_LAYER_ENTRY.pack(layer.in_dim, layer.out_dim, layer.activation.value))
    for layer in net.layers:
        for array in (layer.W, layer.Q, layer.alpha):
            parts.append(np.ascontiguousarray(array, dtype='<f8').tobytes())
    return b''.join(parts)


def deserialize(data):
    # type: (bytes) -> MnnNetwork
    data = bytes(data)
    if len(data) < _HEADER.size:
        raise TruncatedModelError('model stream is {} bytes, shorter than its header'.format(len(data)))
    magic, version, gamma, input_dim, output_dim, count = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC:
        raise ModelFormatError('not a model file (bad magic {!r})'.format(magic))
    if version not in (1, FORMAT_VERSION):
        raise ModelVersionError('model format version {} is not supported (expected 1 or {})'.format(
            version, FORMAT_VERSION))
    if not (math.isfinite(gamma) and gamma > 0.0):
        raise ModelFormatError('gamma must be positive, got {!r}'.format(gamma))
    if count == 0:
        raise ModelDimensionError('model declares zero layers')

    offset = _HEADER.size
    mode_tag, output_dt = OutputMode.POSITION.value, 1.0
    has_seed, split_seed, split_segment_len, holdout_rmse = 0, 0, 0, math.nan
    if version >= 2:
        if len(data) < offset + _HEADER_V2.size:
            raise TruncatedModelError('model stream ends inside its header')
        (mode_tag, output_dt, has_seed, split_seed, split_segment_len,
         holdout_rmse) = _HEADER_V2.unpack_from(data, offset)
        offset += _HEADER_V2.size
    try:
        output_mode = OutputMode(mode_tag)
    except ValueError:
        raise ModelFormatError('unknown output mode tag {}'.format(mode_tag))

    if len(data) < offset + count * _LAYER_ENTRY.size:
        raise TruncatedModelError('model stream ends inside the layer table')
    entries = []
    expected_in = input_dim
    for index in range(count):
        in_dim, out_dim, tag = _LAYER_ENTRY.unpack_from(data, offset)
        offset += _LAYER_ENTRY.size
        if in_dim != expected_in:
            raise ModelDimensionError('layer {} declares {} inputs, expected {}'.format(
                index + 1, in_dim, expected_in))
        if out_dim == 0:
            raise ModelDimensionError('layer {} declares zero outputs'.format(index + 1))
        try:
            activation = Activation(tag)
        except ValueError:
            raise ModelFormatError('layer {} has unknown activation tag {}'.format(index + 1, tag))
        entries.append((in_dim, out_dim, activation))
        expected_in = out_dim
    if expected_in != output_dim:
        raise ModelDimensionError('last layer produces {} outputs, header declares {}'.format(
            expected_in, output_dim))

    payload = sum(8 * (o * i + o * o + o) for (i, o, _) in entries)
    remaining = len(data) - offset
    if remaining < payload:
        raise TruncatedModelError('model payload is {} bytes, expected {}'.format(remaining, payload))
    if remaining > payload:
        raise ModelFormatError('{} trailing bytes after the model payload'.format(remaining - payload))

    def take(count):
        # type: (int) -> np.ndarray
        nonlocal offset
        array = np.frombuffer(data, dtype='<f8', count=count, offset=offset).astype(float)
        offset += 8 * count
        return array

    layers = []
    for (in_dim, out_dim, activation) in entries:
        W = take(out_dim * in_dim).reshape(out_dim, in_dim)
        Q = take(out_dim * out_dim).reshape(out_dim, out_dim)
        alpha = take(out_dim)
        layers.append(MnnLayer(W, Q, alpha, activation))
    try:
        net = MnnNetwork(layers, gamma=gamma, output_mode=output_mode, output_dt=output_dt)
    except ConfigValidationError as e:
        raise ModelFormatError(str(e))
    net.split_seed = split_seed if has_seed else None
    net.split_segment_len = split_segment_len
    net.holdout_rmse = holdout_rmse
    return net


def save_model(net, path):
    # type: (MnnNetwork, str) -> None
    with open(path, 'wb') as f:
        f.write(serialize(net))
    logger.info('Wrote model (%d layers, gamma=%g, %s output) to %s', net.depth, net.gamma,
                net.output_mode.label, path)


def load_model(path):
    # type: (str) -> MnnNetwork
    with open(path, 'rb') as f:
        return deserialize(f.read())
