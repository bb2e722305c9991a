#!/usr/bin/env python3
'''
The `snmnn` command: one binary with a subcommand per pipeline stage.

    simulate  fly a trajectory (or the fixture suite) and write flight logs
    train     train a network on flight logs and write the model file
    evaluate  one-step prediction RMSE of a model on the held-out split
    fuse      replay held-out flight data through the network and the Kalman filter
    convert   ENU / ECEF / geodetic conversions of triples read from stdin
    plotdata  tables for redrawing the loss, prediction and fusion plots
    audit     Monte-Carlo check of a network's Lipschitz bound

A model file remembers how its training data was split, so evaluate, fuse
and plotdata rebuild the same held-out split when given the same logs.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure.  Logs go to stderr; stdout and written files only depend on the
inputs and seeds.
'''

import argparse
import glob
import logging
import math
import os
import sys
import types
from concurrent.futures import ProcessPoolExecutor
from typing import IO, Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, TypeVar

import numpy as np
import pandas as pd

from snmnn import __version__, config, flightlog, fusion, geodesy, mnn_core, trainer, uav_sim
from snmnn.custom_exceptions import (
    ConfigValidationError,
    DataError,
    MalformedValueError,
    NumericalError,
)
from snmnn.flightlog import FLOAT_FORMAT, FlightLog, LogRun

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

# Published position RMSEs in meters, printed next to a result for context.
LITERATURE_RMSE_M = [
    ('VINS-Mono', 0.18),
    ('VIO', 0.13),
    ('MNN + EKF', 0.542),
    ('SN-MNN + EKF', 0.05953),
]

DEFAULT_ORIGIN_DEG = (0.0, 0.0, 0.0)
AUDIT_WARMUP_STEPS = 10
CONVERSIONS = ('enu2geo', 'geo2enu', 'enu2ecef', 'ecef2enu', 'geo2ecef', 'ecef2geo')

SIMULATE_KEYS = ('plan', 'duration', 'radius', 'side', 'altitude', 'speed', 'extent', 'seed',
                 'noise_sigma', 'wind', 'offset')
DATASET_KEYS = ('segment_len',)
EVALUATE_KEYS = ('seed', 'segment_len', 'split')
FUSION_KEYS = ('imu_rate', 'gps_rate', 'gps_sigma', 'fix_noise', 'accel_sigma', 'imu_noise',
               'gate', 'max_rejections', 'feedback')
FUSE_KEYS = FUSION_KEYS + ('seed', 'origin', 'split', 'split_seed', 'segment_len')
PLOTDATA_KEYS = ('seed', 'segment_len', 'gps_rate', 'gps_sigma', 'fix_noise', 'feedback', 'origin')
CONVERT_KEYS = ('origin',)
AUDIT_KEYS = ('pairs', 'seed', 'range', 'gamma', 'hidden')

SPLITS = ('test', 'train', 'all')
REPLAY_SPLITS = ('test', 'all')

Job = TypeVar('Job')
Result = TypeVar('Result')


def custom_error_handling(self, message):
    # type: (argparse.ArgumentParser, str) -> None
    self.print_help(sys.stderr)
    self.exit(EXIT_USAGE, '{}: error: {}\n'.format(self.prog, message))


def _patch_error(parser):
    # type: (argparse.ArgumentParser) -> argparse.ArgumentParser
    parser.error = types.MethodType(custom_error_handling, parser)  # type: ignore # patching function
    return parser


def _common_arguments():
    # type: () -> argparse.ArgumentParser
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', '-c',
                        action='store',
                        help='flat key = value config file; flags override its values')
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument('--verbose', '-v',
                           action='store_true',
                           help='log debug output')
    verbosity.add_argument('--quiet', '-q',
                           action='store_true',
                           help='only log errors')
    return common


def _add_data_arguments(parser):
    # type: (argparse.ArgumentParser) -> None
    parser.add_argument('--data', '-d',
                        nargs='*',
                        metavar='PATH',
                        help='flight log files or directories (default: ${} or ./{})'.format(
                            config.FIXTURE_DIR_ENV, config.DEFAULT_FIXTURE_DIR))
    parser.add_argument('--segment-len',
                        type=int,
                        help='pairs per shuffled chunk of the train/test split (default: the '
                             'model\'s, else {})'.format(flightlog.DEFAULT_SEGMENT_LEN))


def _add_origin_argument(parser):
    # type: (argparse.ArgumentParser) -> None
    parser.add_argument('--origin',
                        nargs=3,
                        type=float,
                        metavar=('LAT', 'LON', 'ALT'),
                        help='geodetic origin of the ENU frame in degrees and meters '
                             '(default 0 0 0)')


def _add_fusion_arguments(parser):
    # type: (argparse.ArgumentParser) -> None
    parser.add_argument('--gps-rate', type=float, help='rate of pseudo-GPS fixes in Hz (default 10)')
    parser.add_argument('--gps-sigma', type=float,
                        help='one-step fix std in meters (default: from the model\'s held-out '
                             'RMSE, else 0.05)')
    parser.add_argument('--fix-noise', choices=fusion.FIX_NOISE_MODES,
                        help='growth of the fix std while the network runs on its own '
                             'predictions (default random-walk)')
    parser.add_argument('--feedback', choices=fusion.FEEDBACK_MODES,
                        help='position fed back into the network (default prediction)')


def parse_args(argv=None):
    # type: (Optional[Sequence[str]]) -> argparse.Namespace
    usage = '''
        snmnn simulate --plan circle --radius 2 --seed 7 --out circle.csv
        snmnn simulate --suite fixtures [--stress] [--jobs 4]
        snmnn train --data fixtures --out model.snmn [--no-spectral-norm]
        snmnn evaluate --model model.snmn --data fixtures [--baseline] [--compare] [--jobs 4]
        snmnn fuse --model model.snmn --out-dir fused fixtures [--split all]
        snmnn convert enu2geo --origin 47.37 8.54 408 < points.txt
        snmnn plotdata --model model.snmn --out-dir plots [--loss-table loss.csv]
        snmnn audit --model model.snmn
        snmnn <subcommand> --help
        '''
    parser = _patch_error(argparse.ArgumentParser(prog='snmnn', usage=usage))
    parser.add_argument('--version', action='version', version='%(prog)s ' + __version__)
    common = _common_arguments()
    subparsers = parser.add_subparsers(dest='command', metavar='<subcommand>')
    subparsers.required = True

    simulate = _patch_error(subparsers.add_parser(
        'simulate', parents=[common], help='simulate flights and write flight logs'))
    simulate.add_argument('--plan', choices=uav_sim.PLAN_KINDS, help='trajectory (default hover)')
    simulate.add_argument('--duration', type=float, help='flight time in seconds')
    simulate.add_argument('--radius', type=float, help='circle radius in meters')
    simulate.add_argument('--side', type=float, help='square side in meters')
    simulate.add_argument('--altitude', type=float, help='flight height above the origin in meters')
    simulate.add_argument('--speed', type=float, help='cruise speed in m/s')
    simulate.add_argument('--extent', type=float, help='half-width of the random waypoint box')
    simulate.add_argument('--offset', nargs=3, type=float, metavar=('E', 'N', 'U'),
                          help='ENU offset of the whole trajectory')
    simulate.add_argument('--seed', type=int, help='seed of waypoints, wind and noise')
    simulate.add_argument('--noise-sigma', type=float,
                          help='std of the position noise in meters (default 0.01)')
    simulate.add_argument('--wind', action='store_const', const=True,
                          help='fly in mild steady wind with gusts')
    simulate.add_argument('--out', '-o', help='flight log to write')
    simulate.add_argument('--suite', nargs='?', const='', metavar='DIR',
                          help='write the standard fixture suite to DIR (default fixture dir)')
    simulate.add_argument('--stress', action='store_true',
                          help='with --suite, write the far-from-origin stress fixtures to DIR/stress')
    simulate.add_argument('--jobs', '-j', type=int, default=1, help='parallel simulations')
    simulate.set_defaults(handler=cmd_simulate)

    train = _patch_error(subparsers.add_parser(
        'train', parents=[common], help='train a network on flight logs'))
    _add_data_arguments(train)
    train.add_argument('--out', '-o', required=True, help='model file to write')
    train.add_argument('--loss-table', help='write the (epoch, loss) table to this CSV file')
    train.add_argument('--eta', type=float, help='learning rate (default 1e-3)')
    train.add_argument('--gamma', type=float, help='Lipschitz bound of the network (default 1)')
    train.add_argument('--epochs', type=int, help='training epochs (default 50)')
    train.add_argument('--alpha-mode', choices=trainer.ALPHA_MODES, help='memory coefficients')
    train.add_argument('--alpha-value', type=float, help='fixed/initial memory coefficient')
    train.add_argument('--eta-alpha', type=float, help='learning rate of learned alphas')
    train.add_argument('--seed', type=int, help='seed of the weights and the split (default 0)')
    train.add_argument('--renorm-every', choices=trainer.RENORM_MODES,
                       help='spectral renormalization after every sample or epoch')
    train.add_argument('--hidden', type=int, help='hidden layer width (default 100)')
    train.add_argument('--target', choices=trainer.TARGETS,
                       help='what the network outputs: the step velocity or the next '
                            'position (default velocity)')
    train.add_argument('--no-spectral-norm', dest='spectral_norm', action='store_const',
                       const=False, help='train without the Lipschitz constraint')
    train.set_defaults(handler=cmd_train)

    evaluate = _patch_error(subparsers.add_parser(
        'evaluate', parents=[common], help='one-step prediction RMSE of a model'))
    _add_data_arguments(evaluate)
    evaluate.add_argument('--model', '-m', required=True, help='model file')
    evaluate.add_argument('--seed', type=int,
                          help='seed of the train/test split (default: the model\'s, else 0)')
    evaluate.add_argument('--split', choices=SPLITS, help='samples to score (default test)')
    evaluate.add_argument('--baseline', action='store_true',
                          help='also score the predict-previous-position baseline')
    evaluate.add_argument('--compare', action='store_true',
                          help='print published RMSEs next to the result')
    evaluate.add_argument('--jobs', '-j', type=int, default=1,
                          help='parallel evaluations over groups of segments')
    evaluate.set_defaults(handler=cmd_evaluate)

    fuse = _patch_error(subparsers.add_parser(
        'fuse', parents=[common], help='fuse network predictions with IMU data'))
    fuse.add_argument('logs', nargs='*', metavar='LOG',
                      help='flight logs the model was trained on, or directories '
                           '(default: the fixture dir)')
    fuse.add_argument('--model', '-m', required=True, help='model file')
    fuse.add_argument('--out-dir', required=True, help='directory for the fused time series')
    fuse.add_argument('--split', choices=REPLAY_SPLITS,
                      help='replay the held-out runs of the model\'s split or whole logs '
                           '(default test)')
    fuse.add_argument('--split-seed', type=int,
                      help='seed of the train/test split (default: the model\'s, else 0)')
    fuse.add_argument('--segment-len', type=int,
                      help='pairs per chunk of the train/test split (default: the model\'s)')
    _add_origin_argument(fuse)
    fuse.add_argument('--imu-rate', type=float, help='IMU rate in Hz (default 100)')
    _add_fusion_arguments(fuse)
    fuse.add_argument('--accel-sigma', type=float,
                      help='floor of the process acceleration std (default 0.002)')
    fuse.add_argument('--imu-noise', type=float, help='synthetic IMU noise std (default 0)')
    fuse.add_argument('--gate', type=float, help='innovation gate in sigmas (default 5)')
    fuse.add_argument('--max-rejections', type=int,
                      help='gated fixes in a row before one is applied ungated, 0 for never '
                           '(default 10)')
    fuse.add_argument('--seed', type=int, help='seed of the IMU noise (default 0)')
    fuse.add_argument('--jobs', '-j', type=int, default=1, help='parallel replays')
    fuse.set_defaults(handler=cmd_fuse)

    convert = _patch_error(subparsers.add_parser(
        'convert', parents=[common], help='convert coordinate triples'))
    convert.add_argument('mode', choices=CONVERSIONS,
                         help='conversion; geodetic triples are (lat deg, lon deg, alt m)')
    _add_origin_argument(convert)
    convert.add_argument('--input', '-i', type=argparse.FileType('r'), default='-',
                         help='file of triples, one per line (default stdin)')
    convert.set_defaults(handler=cmd_convert)

    plotdata = _patch_error(subparsers.add_parser(
        'plotdata', parents=[common], help='write the tables behind the result plots'))
    _add_data_arguments(plotdata)
    plotdata.add_argument('--model', '-m', required=True, help='model file')
    plotdata.add_argument('--out-dir', required=True, help='directory for the tables')
    plotdata.add_argument('--loss-table', help='loss table written by train --loss-table')
    plotdata.add_argument('--seed', type=int,
                          help='seed of the train/test split (default: the model\'s, else 0)')
    _add_origin_argument(plotdata)
    _add_fusion_arguments(plotdata)
    plotdata.set_defaults(handler=cmd_plotdata)

    audit = _patch_error(subparsers.add_parser(
        'audit', parents=[common], help='check the Lipschitz bound of networks'))
    nets = audit.add_mutually_exclusive_group(required=True)
    nets.add_argument('--model', '-m', help='model file')
    nets.add_argument('--random-nets', type=int, metavar='N',
                      help='audit N freshly initialized networks')
    audit.add_argument('--pairs', type=int, help='input pairs per network (default 10000)')
    audit.add_argument('--seed', type=int, help='seed of the inputs and random nets (default 0)')
    audit.add_argument('--range', type=float, help='half-width of the position box (default 5)')
    audit.add_argument('--gamma', type=float, help='Lipschitz bound of random nets (default 1)')
    audit.add_argument('--hidden', type=int, help='hidden width of random nets (default 100)')
    audit.set_defaults(handler=cmd_audit)

    return parser.parse_args(argv)


def configure_logging(args):
    # type: (argparse.Namespace) -> None
    if args.quiet:
        level = logging.ERROR
    elif args.verbose:
        level = logging.DEBUG
    else:
        level = logging.INFO
    logging.basicConfig(stream=sys.stderr, level=level,
                        format='%(levelname)s %(name)s: %(message)s', force=True)


def read_settings(args, section, allowed, flags):
    # type: (argparse.Namespace, str, Sequence[str], Mapping[str, Any]) -> Dict[str, Any]
    '''Config file values for `section`, overridden by the flags that were given.'''
    from_file = {}  # type: Dict[str, Any]
    if args.config:
        from_file = config.read_config_file(args.config, section)
        config.reject_unknown(from_file, allowed, args.config)
    return config.merge(from_file, flags)


def _floats(key, value, count):
    # type: (str, Any, int) -> Tuple[float, ...]
    items = value.replace(',', ' ').split() if isinstance(value, str) else list(value)
    if len(items) != count:
        raise ConfigValidationError('{} needs {} numbers, got {!r}'.format(key, count, value))
    return tuple(config.to_float(key, item) for item in items)


def parse_origin(settings):
    # type: (Mapping[str, Any]) -> geodesy.GeodeticCoord
    lat, lon, alt = _floats('origin', settings.get('origin', DEFAULT_ORIGIN_DEG), 3)
    try:
        return geodesy.GeodeticCoord.from_degrees(lat, lon, alt)
    except DataError as e:
        raise ConfigValidationError('origin: {}'.format(e))


def find_logs(paths):
    # type: (Optional[Sequence[str]]) -> List[str]
    '''Expands directories to their *.csv files, sorted; missing paths are an error.'''
    if not paths:
        paths = [config.get_fixture_dir()]
    found = []
    for path in paths:
        if os.path.isdir(path):
            found.extend(sorted(glob.glob(os.path.join(path, '*.csv'))))
        elif os.path.isfile(path):
            found.append(path)
        else:
            raise ConfigValidationError('{} does not exist'.format(path))
    if not found:
        raise ConfigValidationError('no flight logs (*.csv) in {}'.format(', '.join(paths)))
    return found


def load_logs(paths, rate_hz=flightlog.DEFAULT_RATE_HZ):
    # type: (Optional[Sequence[str]], float) -> List[FlightLog]
    logs = []
    for path in find_logs(paths):
        log = flightlog.parse(path)
        if log.native_rate > rate_hz * (1.0 + 1e-6):
            log = flightlog.resample(log, rate_hz)
        logs.append(log)
    return logs


def load_model(path):
    # type: (str) -> mnn_core.MnnNetwork
    if not os.path.isfile(path):
        raise ConfigValidationError('model file {} does not exist'.format(path))
    return mnn_core.load_model(path)


def split_settings(settings, net=None, seed_key='seed'):
    # type: (Mapping[str, Any], Optional[mnn_core.MnnNetwork], str) -> Tuple[int, int]
    '''Seed and chunk length of the split: explicit settings, then the model's, then defaults.'''
    seed = settings.get(seed_key)
    if seed is None:
        seed = net.split_seed if net is not None and net.split_seed is not None else 0
    segment_len = settings.get('segment_len')
    if segment_len is None:
        segment_len = (net.split_segment_len if net is not None and net.split_segment_len
                       else flightlog.DEFAULT_SEGMENT_LEN)
    return config.to_int(seed_key, seed), config.to_int('segment_len', segment_len)


def load_dataset(paths, settings, net=None, seed_key='seed', logs=None):
    # type: (Optional[Sequence[str]], Mapping[str, Any], Optional[mnn_core.MnnNetwork], str, Optional[List[FlightLog]]) -> flightlog.Dataset
    seed, segment_len = split_settings(settings, net, seed_key)
    if net is not None:
        logger.debug('Splitting with seed %d and %d-pair chunks', seed, segment_len)
    return flightlog.build_dataset(load_logs(paths) if logs is None else logs,
                                   seed=seed, segment_len=segment_len)


def _check_jobs(jobs):
    # type: (int) -> int
    if jobs < 1:
        raise ConfigValidationError('--jobs must be at least 1, got {}'.format(jobs))
    return jobs


def run_jobs(function, jobs, workers):
    # type: (Callable[[Job], Result], Sequence[Job], int) -> List[Result]
    '''Maps `function` over `jobs` in up to `workers` processes; results keep the input order.'''
    if workers == 1 or len(jobs) < 2:
        return [function(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(function, jobs))


def _number(value):
    # type: (float) -> str
    return FLOAT_FORMAT % value


def _print_summary(items, out=None):
    # type: (Sequence[Tuple[str, Any]], Optional[IO[str]]) -> None
    for key, value in items:
        text = _number(value) if isinstance(value, float) else str(value)
        print('{}={}'.format(key, text), file=out)


def simulate_job(job):
    # type: (Tuple[uav_sim.TrajectoryPlan, uav_sim.NoiseConfig, str]) -> str
    plan, noise, path = job
    flightlog.write(uav_sim.generate_flight(plan, noise=noise), path)
    return path


def _plan(settings, duration_default):
    # type: (Mapping[str, Any], float) -> uav_sim.TrajectoryPlan
    defaults = uav_sim.TrajectoryPlan()
    return uav_sim.TrajectoryPlan(
        kind=config.to_choice('plan', settings.get('plan', defaults.kind), uav_sim.PLAN_KINDS),
        duration_s=config.to_float('duration', settings.get('duration', duration_default)),
        radius_m=config.to_float('radius', settings.get('radius', defaults.radius_m)),
        side_m=config.to_float('side', settings.get('side', defaults.side_m)),
        altitude_m=config.to_float('altitude', settings.get('altitude', defaults.altitude_m)),
        speed_mps=config.to_float('speed', settings.get('speed', defaults.speed_mps)),
        extent_m=config.to_float('extent', settings.get('extent', defaults.extent_m)),
        seed=config.to_int('seed', settings.get('seed', defaults.seed)),
        offset=_floats('offset', settings.get('offset', defaults.offset), 3),  # type: ignore
        wind=config.to_bool('wind', settings.get('wind', defaults.wind)),
    ).validate()


def cmd_simulate(args):
    # type: (argparse.Namespace) -> int
    settings = read_settings(args, 'simulate', SIMULATE_KEYS, {
        'plan': args.plan,
        'duration': args.duration,
        'radius': args.radius,
        'side': args.side,
        'altitude': args.altitude,
        'speed': args.speed,
        'extent': args.extent,
        'offset': args.offset,
        'seed': args.seed,
        'noise_sigma': args.noise_sigma,
        'wind': args.wind,
    })
    workers = _check_jobs(args.jobs)
    sigma = config.to_float('noise_sigma', settings.get('noise_sigma', uav_sim.NoiseConfig.sigma_m))

    if args.suite is None:
        if args.out is None:
            raise ConfigValidationError('simulate needs --out FILE or --suite [DIR]')
        if args.stress:
            raise ConfigValidationError('--stress only applies to --suite')
        plan = _plan(settings, uav_sim.TrajectoryPlan.duration_s)
        jobs = [(plan, uav_sim.NoiseConfig(sigma, plan.seed).validate(), args.out)]
    else:
        if args.out is not None:
            raise ConfigValidationError('--out and --suite are mutually exclusive')
        out_dir = args.suite or config.get_fixture_dir()
        if args.stress:
            out_dir = os.path.join(out_dir, 'stress')
        os.makedirs(out_dir, exist_ok=True)
        duration = config.to_float('duration', settings.get('duration', uav_sim.SUITE_DURATION_S))
        jobs = [(plan, uav_sim.NoiseConfig(sigma, plan.seed).validate(),
                 os.path.join(out_dir, '{}.csv'.format(plan.name)))
                for plan in uav_sim.fixture_suite(duration, stress=args.stress)]

    for path in run_jobs(simulate_job, jobs, workers):
        print(path)
    return EXIT_OK


def cmd_train(args):
    # type: (argparse.Namespace) -> int
    flags = {
        'eta': args.eta,
        'gamma': args.gamma,
        'epochs': args.epochs,
        'alpha_mode': args.alpha_mode,
        'alpha_value': args.alpha_value,
        'eta_alpha': args.eta_alpha,
        'seed': args.seed,
        'renorm_every': args.renorm_every,
        'hidden': args.hidden,
        'target': args.target,
        'spectral_norm': args.spectral_norm,
        'segment_len': args.segment_len,
    }
    settings = read_settings(args, 'train', trainer.FILE_KEYS + DATASET_KEYS, flags)
    train_settings = {key: value for (key, value) in settings.items() if key not in DATASET_KEYS}
    cfg = trainer.TrainConfig.from_mapping(train_settings, source=args.config or 'flags')
    dataset = load_dataset(args.data, settings)

    net = trainer.init_weights((mnn_core.INPUT_DIM, cfg.hidden, mnn_core.OUTPUT_DIM),
                               seed=cfg.seed, gamma=cfg.gamma, alpha=cfg.alpha_value)
    net, report = trainer.train(net, dataset.train, cfg)
    rmse_test = trainer.record_split(net, dataset)
    mnn_core.save_model(net, args.out)
    if args.loss_table:
        report.write_loss_table(args.loss_table)

    _print_summary([
        ('mode', report.mode),
        ('target', cfg.target),
        ('epochs', len(report.per_epoch_loss)),
        ('final_loss', report.per_epoch_loss[-1]),
        ('rmse_train', report.final_rmse_train),
        ('rmse_test', rmse_test),
    ])
    return EXIT_OK


def _split_segments(dataset, split):
    # type: (flightlog.Dataset, str) -> List[flightlog.Segment]
    if split == 'train':
        return dataset.train
    if split == 'test':
        return dataset.test
    return dataset.train + dataset.test


def evaluate_job(job):
    # type: (Tuple[mnn_core.MnnNetwork, List[flightlog.Segment]]) -> Tuple[float, int]
    net, segments = job
    return trainer.evaluate(net, segments), sum(len(segment) for segment in segments)


def evaluate_segments(net, segments, workers):
    # type: (mnn_core.MnnNetwork, Sequence[flightlog.Segment], int) -> float
    '''trainer.evaluate, with the segments spread over up to `workers` processes.'''
    if len(segments) < 2:
        return trainer.evaluate(net, segments)
    groups = [[segments[index] for index in indices]
              for indices in np.array_split(np.arange(len(segments)), min(workers, len(segments)))]
    results = run_jobs(evaluate_job, [(net, group) for group in groups], workers)
    squared = sum(rmse * rmse * count for (rmse, count) in results)
    total = sum(count for (_, count) in results)
    rmse = math.sqrt(squared / total)
    return rmse if math.isfinite(rmse) else math.inf


def cmd_evaluate(args):
    # type: (argparse.Namespace) -> int
    settings = read_settings(args, 'evaluate', EVALUATE_KEYS, {
        'seed': args.seed,
        'segment_len': args.segment_len,
        'split': args.split,
    })
    workers = _check_jobs(args.jobs)
    split = config.to_choice('split', settings.get('split', 'test'), SPLITS)
    net = load_model(args.model)
    segments = _split_segments(load_dataset(args.data, settings, net), split)
    if workers == 1:
        rmse = trainer.evaluate(net, segments)
    else:
        rmse = evaluate_segments(net, segments, workers)

    summary = [
        ('split', split),
        ('samples', sum(len(segment) for segment in segments)),
        ('rmse', rmse),
    ]  # type: List[Tuple[str, Any]]
    if args.baseline:
        summary.append(('rmse_baseline', trainer.evaluate(mnn_core.persistence_network(net.gamma),
                                                          segments)))
    _print_summary(summary)
    if args.compare:
        print('# published position RMSE (m), real flights:')
        for name, value in LITERATURE_RMSE_M:
            print('#   {:<14} {}'.format(name, _number(value)))
    return EXIT_OK


def fusion_config(settings, net=None):
    # type: (Mapping[str, Any], Optional[mnn_core.MnnNetwork]) -> fusion.FusionConfig
    defaults = fusion.FusionConfig()
    gps_sigma = settings.get('gps_sigma')
    if gps_sigma is None:
        gps_sigma = fusion.model_fix_sigma(net) or defaults.gps_sigma_m
    return fusion.FusionConfig(
        imu_rate_hz=config.to_float('imu_rate', settings.get('imu_rate', defaults.imu_rate_hz)),
        gps_rate_hz=config.to_float('gps_rate', settings.get('gps_rate', defaults.gps_rate_hz)),
        gps_sigma_m=config.to_float('gps_sigma', gps_sigma),
        fix_noise=config.to_choice('fix_noise', settings.get('fix_noise', defaults.fix_noise),
                                   fusion.FIX_NOISE_MODES),
        accel_process_sigma=config.to_float('accel_sigma', settings.get(
            'accel_sigma', defaults.accel_process_sigma)),
        imu_noise_sigma=config.to_float('imu_noise', settings.get(
            'imu_noise', defaults.imu_noise_sigma)),
        gate_sigma=config.to_float('gate', settings.get('gate', defaults.gate_sigma)),
        max_rejections=config.to_int('max_rejections', settings.get(
            'max_rejections', defaults.max_rejections)),
        feedback=config.to_choice('feedback', settings.get('feedback', defaults.feedback),
                                  fusion.FEEDBACK_MODES),
        seed=config.to_int('seed', settings.get('seed', defaults.seed)),
    ).validate()


def _stem(path):
    # type: (Optional[str]) -> str
    return os.path.splitext(os.path.basename(path or 'log'))[0]


def run_name(run):
    # type: (LogRun) -> str
    return '{}.{}-{}'.format(_stem(run.log.source), run.start, run.stop)


def replay_runs(logs, settings, net, cfg, seed_key='seed'):
    # type: (List[FlightLog], Mapping[str, Any], mnn_core.MnnNetwork, fusion.FusionConfig, str) -> List[LogRun]
    '''The held-out runs of the model's split; replay needs a few rows to derive IMU data.'''
    if net.split_seed is None and settings.get(seed_key) is None:
        logger.warning('The model does not record its train/test split; using seed 0')
    dataset = load_dataset(None, settings, net, seed_key, logs=logs)
    runs = flightlog.held_out_logs(logs, dataset, min_rows=cfg.savgol_order + 2)
    if not runs:
        raise DataError('no held-out run is long enough to replay')
    return runs


def fuse_job(job):
    # type: (Tuple[FlightLog, mnn_core.MnnNetwork, geodesy.GeodeticCoord, fusion.FusionConfig, str]) -> Dict[str, Any]
    log, net, origin, cfg, path = job
    report = fusion.replay(log, net, origin, cfg)
    report.write_csv(path)
    return report.summary()


def cmd_fuse(args):
    # type: (argparse.Namespace) -> int
    settings = read_settings(args, 'fuse', FUSE_KEYS, {
        'imu_rate': args.imu_rate,
        'gps_rate': args.gps_rate,
        'gps_sigma': args.gps_sigma,
        'fix_noise': args.fix_noise,
        'accel_sigma': args.accel_sigma,
        'imu_noise': args.imu_noise,
        'gate': args.gate,
        'max_rejections': args.max_rejections,
        'feedback': args.feedback,
        'seed': args.seed,
        'origin': args.origin,
        'split': args.split,
        'split_seed': args.split_seed,
        'segment_len': args.segment_len,
    })
    workers = _check_jobs(args.jobs)
    split = config.to_choice('split', settings.get('split', 'test'), REPLAY_SPLITS)
    net = load_model(args.model)
    cfg = fusion_config(settings, net)
    origin = parse_origin(settings)
    logs = load_logs(args.logs)
    os.makedirs(args.out_dir, exist_ok=True)

    if split == 'test':
        named = [(run_name(run), run.log) for run in
                 replay_runs(logs, settings, net, cfg, seed_key='split_seed')]
    else:
        named = [(_stem(log.source), log) for log in logs]
    jobs = [(log, net, origin, cfg, os.path.join(args.out_dir, '{}.fused.csv'.format(name)))
            for (name, log) in named]
    for (name, _), summary in zip(named, run_jobs(fuse_job, jobs, workers)):
        print('# {}'.format(name))
        _print_summary(list(summary.items()))
    return EXIT_OK


def read_triples(stream):
    # type: (IO[str]) -> np.ndarray
    '''Whitespace or comma separated triples, one per line; blank and # lines are skipped.'''
    source = getattr(stream, 'name', '<stdin>')
    rows = []
    for number, line in enumerate(stream, start=1):
        text = line.split('#', 1)[0].replace(',', ' ').strip()
        if not text:
            continue
        fields = text.split()
        if len(fields) != 3:
            raise MalformedValueError('expected 3 numbers, got {}'.format(len(fields)),
                                      source, number)
        try:
            row = [float(field) for field in fields]
        except ValueError:
            raise MalformedValueError('{!r} is not a number triple'.format(text), source, number)
        if not all(np.isfinite(row)):
            raise MalformedValueError('non-finite value in {!r}'.format(text), source, number)
        rows.append(row)
    return np.array(rows, dtype=float).reshape(-1, 3)


def _degrees_to_radians(rows):
    # type: (np.ndarray) -> np.ndarray
    if np.any(np.abs(rows[:, 0]) > 90.0):
        raise MalformedValueError('latitude outside [-90, 90] degrees')
    return np.column_stack([np.radians(rows[:, 0]), np.radians(rows[:, 1]), rows[:, 2]])


def _radians_to_degrees(rows):
    # type: (np.ndarray) -> np.ndarray
    return np.column_stack([np.degrees(rows[:, 0]), np.degrees(rows[:, 1]), rows[:, 2]])


def convert_rows(mode, rows, origin):
    # type: (str, np.ndarray, geodesy.GeodeticCoord) -> np.ndarray
    if len(rows) == 0:
        return rows
    if mode == 'enu2geo':
        return _radians_to_degrees(geodesy.enu_to_geodetic_array(rows, origin))
    if mode == 'geo2enu':
        return geodesy.geodetic_to_enu_array(_degrees_to_radians(rows), origin)
    if mode == 'enu2ecef':
        return geodesy.enu_to_ecef_array(rows, origin)
    if mode == 'ecef2enu':
        return geodesy.ecef_to_enu_array(rows, origin)
    if mode == 'geo2ecef':
        return geodesy.geodetic_to_ecef_array(_degrees_to_radians(rows))
    if mode == 'ecef2geo':
        return _radians_to_degrees(geodesy.ecef_to_geodetic_array(rows))
    raise ConfigValidationError('unknown conversion {!r}'.format(mode))


def cmd_convert(args):
    # type: (argparse.Namespace) -> int
    settings = read_settings(args, 'convert', CONVERT_KEYS, {'origin': args.origin})
    origin = parse_origin(settings)
    for row in convert_rows(args.mode, read_triples(args.input), origin):
        print(' '.join(_number(value) for value in row))
    return EXIT_OK


def prediction_table(net, segments):
    # type: (mnn_core.MnnNetwork, Sequence[flightlog.Segment]) -> pd.DataFrame
    frames = []
    for index, (segment, outputs) in enumerate(zip(segments, trainer.predict(net, segments))):
        columns = {'source': _stem(segment.source), 'segment': index, 't': segment.times}
        for prefix, block in (('truth', segment.targets), ('pred', outputs)):
            for axis, name in enumerate('xyz'):
                columns['{}_{}'.format(prefix, name)] = block[:, axis]
        frames.append(pd.DataFrame(columns))
    return pd.concat(frames, ignore_index=True)


def cmd_plotdata(args):
    # type: (argparse.Namespace) -> int
    settings = read_settings(args, 'plotdata', PLOTDATA_KEYS, {
        'seed': args.seed,
        'segment_len': args.segment_len,
        'gps_rate': args.gps_rate,
        'gps_sigma': args.gps_sigma,
        'fix_noise': args.fix_noise,
        'feedback': args.feedback,
        'origin': args.origin,
    })
    fusion_settings = {key: settings[key] for key in ('gps_rate', 'gps_sigma', 'fix_noise', 'feedback')
                       if key in settings}
    net = load_model(args.model)
    cfg = fusion_config(fusion_settings, net)
    origin = parse_origin(settings)
    logs = load_logs(args.data)
    dataset = load_dataset(None, settings, net, logs=logs)
    os.makedirs(args.out_dir, exist_ok=True)

    written = []
    if args.loss_table:
        loss = pd.read_csv(args.loss_table)
        if list(loss.columns) != ['epoch', 'loss']:
            raise DataError('{}: expected columns epoch, loss'.format(args.loss_table))
        written.append(os.path.join(args.out_dir, 'loss.csv'))
        loss.to_csv(written[-1], index=False, float_format=FLOAT_FORMAT, lineterminator='\n')

    written.append(os.path.join(args.out_dir, 'prediction.csv'))
    prediction_table(net, dataset.test).to_csv(written[-1], index=False,
                                               float_format=FLOAT_FORMAT, lineterminator='\n')

    for run in flightlog.held_out_logs(logs, dataset, min_rows=cfg.savgol_order + 2):
        written.append(os.path.join(args.out_dir, 'fusion-{}.csv'.format(run_name(run))))
        fusion.replay(run.log, net, origin, cfg).write_csv(written[-1])

    for path in written:
        print(path)
    return EXIT_OK


def cmd_audit(args):
    # type: (argparse.Namespace) -> int
    settings = read_settings(args, 'audit', AUDIT_KEYS, {
        'pairs': args.pairs,
        'seed': args.seed,
        'range': args.range,
        'gamma': args.gamma,
        'hidden': args.hidden,
    })
    pairs = config.to_int('pairs', settings.get('pairs', 10000))
    seed = config.to_int('seed', settings.get('seed', 0))
    position_range = config.to_float('range', settings.get('range', 5.0))
    if pairs < 1 or not position_range > 0.0:
        raise ConfigValidationError('pairs and range must be positive')

    if args.model:
        nets = [load_model(args.model)]
    else:
        if args.random_nets < 1:
            raise ConfigValidationError('--random-nets must be at least 1')
        gamma = config.to_float('gamma', settings.get('gamma', 1.0))
        hidden = config.to_int('hidden', settings.get('hidden', 100))
        nets = [trainer.init_weights((mnn_core.INPUT_DIM, hidden, mnn_core.OUTPUT_DIM),
                                     seed=seed + index, gamma=gamma)
                for index in range(args.random_nets)]

    violations = 0
    for index, net in enumerate(nets):
        rng = np.random.default_rng(seed + index)
        for p in mnn_core.random_inputs(rng, AUDIT_WARMUP_STEPS, net.input_dim, position_range):
            net.forward(p)
        result = mnn_core.lipschitz_audit(net, pairs=pairs, seed=seed + index,
                                          position_range=position_range)
        norms = ' '.join('{}/{}'.format(_number(w), _number(q)) for (w, q) in net.spectral_norms())
        print('# net {}'.format(index))
        _print_summary([('bound', result.bound),
                        ('max_ratio', result.max_ratio),
                        ('violations', result.violations),
                        ('layer_norms', norms)])
        violations += result.violations
    if violations:
        raise NumericalError('{} Lipschitz violation(s)'.format(violations))
    return EXIT_OK


def main(argv=None):
    # type: (Optional[Sequence[str]]) -> int
    args = parse_args(argv)
    configure_logging(args)
    handler = args.handler  # type: Callable[[argparse.Namespace], int]
    try:
        return handler(args)
    except ConfigValidationError as e:
        logger.error('%s', e)
        return EXIT_USAGE
    except DataError as e:
        logger.error('%s', e)
        return EXIT_DATA
    except NumericalError as e:
        logger.error('%s', e)
        return EXIT_NUMERICAL
    except OSError as e:
        logger.error('%s', e)
        return EXIT_DATA


if __name__ == '__main__':
    sys.exit(main())
