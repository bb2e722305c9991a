'''
Online training of the memory neuron network.

Every sample is processed in temporal order: forward, error, truncated
backpropagation (the memory state is treated as a constant input of the
current step), a plain gradient step on W, Q and optionally alpha, and
spectral renormalization of every W and Q back to gamma**(1/L).
'''

import logging
import math
import time
from dataclasses import dataclass, field
from typing import (IO, Any, Callable, List, Mapping, NamedTuple, Optional, Sequence, Tuple,
                    Union)

import numpy as np
import pandas as pd

from snmnn import config
from snmnn.custom_exceptions import (
    ConfigValidationError,
    DatasetError,
    DimensionError,
    DivergenceError,
)
from snmnn.flightlog import FLOAT_FORMAT, Dataset, Segment
from snmnn.mnn_core import (
    INPUT_DIM,
    OUTPUT_DIM,
    Activation,
    InputVector,
    MnnLayer,
    MnnNetwork,
    OutputMode,
)

logger = logging.getLogger(__name__)

ALPHA_MODES = ('fixed', 'learned')
RENORM_MODES = ('sample', 'epoch')
TARGETS = ('velocity', 'position')

# Keys accepted in a training config file.
FILE_KEYS = ('eta', 'gamma', 'epochs', 'alpha_mode', 'alpha_value', 'seed', 'renorm_every',
             'eta_alpha', 'hidden', 'spectral_norm', 'target')

Pair = Tuple[Union[InputVector, np.ndarray, Sequence[float]], Sequence[float]]
TrainingData = Union[Sequence[Segment], Sequence[Pair]]
UpdateHook = Callable[[MnnNetwork, int, int], None]
TrainResult = Tuple[MnnNetwork, 'TrainReport']


@dataclass
class TrainConfig:
    eta: float = 1e-3
    gamma: float = 1.0
    epochs: int = 50
    alpha_mode: str = 'fixed'
    alpha_value: float = 0.5
    eta_alpha: float = 1e-4
    seed: int = 0
    renorm_every: str = 'sample'
    spectral_norm: bool = True
    hidden: int = 100
    target: str = 'velocity'

    def validate(self):
        # type: () -> TrainConfig
        if not (math.isfinite(self.eta) and self.eta > 0.0):
            raise ConfigValidationError('eta must be positive, got {!r}'.format(self.eta))
        if not (math.isfinite(self.gamma) and self.gamma > 0.0):
            raise ConfigValidationError('gamma must be positive, got {!r}'.format(self.gamma))
        if self.epochs < 1:
            raise ConfigValidationError('epochs must be at least 1, got {!r}'.format(self.epochs))
        if self.alpha_mode not in ALPHA_MODES:
            raise ConfigValidationError('alpha_mode must be one of {}, got {!r}'.format(
                ', '.join(ALPHA_MODES), self.alpha_mode))
        if not 0.0 <= self.alpha_value <= 1.0:
            raise ConfigValidationError('alpha_value must lie in [0, 1], got {!r}'.format(
                self.alpha_value))
        if not (math.isfinite(self.eta_alpha) and self.eta_alpha > 0.0):
            raise ConfigValidationError('eta_alpha must be positive, got {!r}'.format(self.eta_alpha))
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigValidationError('seed must be an unsigned 64-bit integer, got {!r}'.format(
                self.seed))
        if self.renorm_every not in RENORM_MODES:
            raise ConfigValidationError('renorm_every must be one of {}, got {!r}'.format(
                ', '.join(RENORM_MODES), self.renorm_every))
        if self.hidden < 1:
            raise ConfigValidationError('hidden must be at least 1, got {!r}'.format(self.hidden))
        if self.target not in TARGETS:
            raise ConfigValidationError('target must be one of {}, got {!r}'.format(
                ', '.join(TARGETS), self.target))
        return self

    @classmethod
    def from_mapping(cls, settings, source='config'):
        # type: (Mapping[str, Any], str) -> TrainConfig
        config.reject_unknown(settings, FILE_KEYS, source)
        converters = {
            'eta': config.to_float,
            'gamma': config.to_float,
            'epochs': config.to_int,
            'alpha_mode': lambda key, value: config.to_choice(key, value, ALPHA_MODES),
            'alpha_value': config.to_float,
            'eta_alpha': config.to_float,
            'seed': config.to_int,
            'renorm_every': lambda key, value: config.to_choice(key, value, RENORM_MODES),
            'spectral_norm': config.to_bool,
            'hidden': config.to_int,
            'target': lambda key, value: config.to_choice(key, value, TARGETS),
        }  # type: Mapping[str, Callable[[str, Any], Any]]
        values = {key: converters[key](key, value) for (key, value) in settings.items()}
        return cls(**values).validate()

    @classmethod
    def from_file(cls, config_file, section='train'):
        # type: (str, Optional[str]) -> TrainConfig
        return cls.from_mapping(config.read_config_file(config_file, section), source=config_file)

    @property
    def renormalize_per_sample(self):
        # type: () -> bool
        return self.spectral_norm and self.renorm_every == 'sample'

    @property
    def output_mode(self):
        # type: () -> OutputMode
        return OutputMode.from_label(self.target)


@dataclass
class TrainReport:
    per_epoch_loss: List[float]
    final_rmse_train: float
    constrained: bool = True
    wall_time: float = field(default=0.0, compare=False)

    @property
    def mode(self):
        # type: () -> str
        return 'spectral' if self.constrained else 'unconstrained'

    def loss_table(self):
        # type: () -> pd.DataFrame
        return pd.DataFrame({'epoch': np.arange(1, len(self.per_epoch_loss) + 1),
                             'loss': self.per_epoch_loss})

    def write_loss_table(self, path_or_buffer):
        # type: (Union[str, IO[str]]) -> None
        self.loss_table().to_csv(path_or_buffer, index=False, float_format=FLOAT_FORMAT,
                                 lineterminator='\n')


class LayerGradient(NamedTuple):
    dW: np.ndarray
    dQ: np.ndarray
    dalpha: np.ndarray


def init_weights(dims=(INPUT_DIM, 100, OUTPUT_DIM), seed=0, gamma=1.0, alpha=0.5):
    # type: (Sequence[int], int, float, float) -> MnnNetwork
    '''
    W and Q uniform in [-b, b], b = 1 / sqrt(in_dim), alpha constant, then
    spectrally normalized.  Hidden layers use tanh, the last layer is linear.
    '''
    dims = list(dims)
    if len(dims) < 2 or any(dim < 1 for dim in dims):
        raise ConfigValidationError('invalid layer dimensions {}'.format(dims))
    rng = np.random.default_rng(seed)
    layers = []
    for index, (in_dim, out_dim) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / math.sqrt(in_dim)
        W = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        Q = rng.uniform(-bound, bound, size=(out_dim, out_dim))
        last = index == len(dims) - 2
        layers.append(MnnLayer(W, Q, alpha, Activation.LINEAR if last else Activation.TANH))
    return MnnNetwork(layers, gamma=gamma).normalize_spectral()


def backprop(net, error):
    # type: (MnnNetwork, np.ndarray) -> List[LayerGradient]
    '''
    Gradients of 0.5 * |error|^2, error being the raw network output minus
    its target, for the step traced by the last forward call.  The memory
    input r of each layer is held constant.
    '''
    grads = [None] * net.depth  # type: List[Optional[LayerGradient]]
    delta = np.asarray(error, dtype=float)
    for index in reversed(range(net.depth)):
        layer = net.layers[index]
        trace = layer.trace
        if trace is None:
            raise RuntimeError('backprop needs a preceding forward pass')
        delta_z = delta * layer.activation.derivative(trace.n)
        grads[index] = LayerGradient(dW=np.outer(delta_z, trace.x),
                                     dQ=np.outer(delta_z, trace.r),
                                     dalpha=(layer.Q.T @ delta_z) * (trace.n_prev - trace.r_prev))
        delta = layer.W.T @ delta_z
    return grads  # type: ignore


def apply_update(net, grads, cfg):
    # type: (MnnNetwork, Sequence[LayerGradient], TrainConfig) -> None
    learned = cfg.alpha_mode == 'learned'
    for layer, grad in zip(net.layers, grads):
        layer.W = layer.W - cfg.eta * grad.dW
        layer.Q = layer.Q - cfg.eta * grad.dQ
        if learned:
            layer.alpha = np.clip(layer.alpha - cfg.eta_alpha * grad.dalpha, 0.0, 1.0)


def as_segments(data):
    # type: (TrainingData) -> List[Segment]
    '''Accepts segments, or a flat sequence of (input, target) pairs as one segment.'''
    items = list(data)
    if not items:
        raise DatasetError('no training data')
    if all(isinstance(item, Segment) for item in items):
        return items  # type: ignore
    inputs = []
    targets = []
    for (p, y) in items:  # type: ignore
        inputs.append(p.as_array() if isinstance(p, InputVector) else np.asarray(p, dtype=float))
        targets.append(np.asarray(y, dtype=float))
    return [Segment(inputs=np.vstack(inputs), targets=np.vstack(targets),
                    times=np.arange(len(items), dtype=float))]


def step_seconds(segments):
    # type: (Sequence[Segment]) -> float
    '''Median time between consecutive samples; 1 when no segment has two.'''
    steps = [np.diff(segment.times) for segment in segments if len(segment) > 1]
    if not steps:
        return 1.0
    dt = float(np.median(np.concatenate(steps)))
    if not (math.isfinite(dt) and dt > 0.0):
        raise DatasetError('sample times must increase, median step is {!r}'.format(dt))
    return dt


def _check_dims(net, segments):
    # type: (MnnNetwork, Sequence[Segment]) -> None
    for segment in segments:
        if segment.inputs.shape[1] != net.input_dim:
            raise DimensionError('training input', net.input_dim, segment.inputs.shape[1])
        if segment.targets.shape[1] != net.output_dim:
            raise DimensionError('training target', net.output_dim, segment.targets.shape[1])


def train(net, data, cfg=None, on_update=None):
    # type: (MnnNetwork, TrainingData, Optional[TrainConfig], Optional[UpdateHook]) -> TrainResult
    '''
    Trains `net` in place and returns it with a report.  Memory is reset
    at the start of every epoch and every segment.  `on_update` is called
    as on_update(net, epoch, sample) after every update.

    The loss is the squared position error.  In velocity mode the update
    follows the gradient of the squared velocity error, which is the same
    error divided by the sample step.
    '''
    cfg = (cfg or TrainConfig()).validate()
    segments = [segment for segment in as_segments(data) if len(segment)]
    if not segments:
        raise DatasetError('no training samples')
    _check_dims(net, segments)

    net.gamma = cfg.gamma
    net.set_output(cfg.output_mode, step_seconds(segments))
    if cfg.alpha_mode == 'fixed':
        for layer in net.layers:
            layer.alpha = np.full(layer.out_dim, cfg.alpha_value)
    if cfg.spectral_norm:
        net.normalize_spectral()

    logger.info('Training %s for %d epoch(s) on %d samples (%s, %s output)',
                'x'.join(str(dim) for dim in [net.input_dim] + [layer.out_dim for layer in net.layers]),
                cfg.epochs, sum(len(segment) for segment in segments),
                'spectral norm' if cfg.spectral_norm else 'unconstrained', cfg.target)
    started = time.perf_counter()
    per_epoch_loss = []
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        sample = 0
        for segment in segments:
            net.reset_memory()
            for (p, y) in segment.pairs():
                error = net.predict_position(p) - y
                loss = float(error @ error)
                if not math.isfinite(loss):
                    raise DivergenceError(epoch, sample, 'loss')
                apply_update(net, backprop(net, error / net.output_dt), cfg)
                if not net.weights_finite():
                    raise DivergenceError(epoch, sample, 'weights')
                if cfg.renormalize_per_sample:
                    net.normalize_spectral(warm=True)
                total += loss
                sample += 1
                if on_update is not None:
                    on_update(net, epoch, sample)
        if cfg.spectral_norm and cfg.renorm_every == 'epoch':
            net.normalize_spectral(warm=True)
        per_epoch_loss.append(total / sample)
        logger.info('epoch %d/%d: loss %.6g', epoch, cfg.epochs, per_epoch_loss[-1])

    report = TrainReport(per_epoch_loss=per_epoch_loss,
                         final_rmse_train=evaluate(net, segments),
                         constrained=cfg.spectral_norm,
                         wall_time=time.perf_counter() - started)
    logger.info('Training finished in %.1f s, train RMSE %.4g m', report.wall_time,
                report.final_rmse_train)
    return net, report


def record_split(net, dataset):
    # type: (MnnNetwork, Dataset) -> float
    '''
    Stores how `dataset` was split and the RMSE on its test part in the
    network, so the same held-out data can be rebuilt from the model file.
    '''
    rmse = evaluate(net, dataset.test)
    if dataset.meta is not None:
        net.split_seed = dataset.meta.seed
        net.split_segment_len = dataset.meta.segment_len
    net.holdout_rmse = rmse
    return rmse


def predict(net, data):
    # type: (MnnNetwork, TrainingData) -> List[np.ndarray]
    '''One array of predicted positions (T x 3) per segment; memory is restored afterwards.'''
    segments = as_segments(data)
    _check_dims(net, segments)
    snapshot = net.memory_snapshot()
    try:
        predictions = []
        for segment in segments:
            net.reset_memory()
            outputs = np.empty((len(segment), net.output_dim))
            for (index, p) in enumerate(segment.inputs):
                outputs[index] = net.predict_position(p)
            predictions.append(outputs)
        return predictions
    finally:
        net.restore_memory(snapshot)


def evaluate(net, data):
    # type: (MnnNetwork, TrainingData) -> float
    '''RMSE of the predicted against the logged positions over all samples, in meters.'''
    segments = as_segments(data)
    squared = 0.0
    count = 0
    for (segment, outputs) in zip(segments, predict(net, segments)):
        errors = outputs - segment.targets
        squared += float(np.sum(errors * errors))
        count += len(segment)
    if count == 0:
        raise DatasetError('no evaluation samples')
    rmse = math.sqrt(squared / count)
    return rmse if math.isfinite(rmse) else math.inf
