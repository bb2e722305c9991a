import math
import os
import tempfile
import unittest
from typing import List, Tuple

import numpy as np

from snmnn import mnn_core, trainer, uav_sim
from snmnn.custom_exceptions import ConfigValidationError, DatasetError, DimensionError, DivergenceError
from snmnn.flightlog import build_dataset, log_segment
from snmnn.trainer import TrainConfig

from .snmnn_test_lib import SnmnnTestCase, make_log, matrix_norm, random_input, random_network, still_log


def half_squared_error(net, snapshot, p, y):
    # type: (mnn_core.MnnNetwork, List[Tuple[np.ndarray, np.ndarray]], np.ndarray, np.ndarray) -> float
    net.restore_memory(snapshot)
    error = net.forward(p) - y
    return 0.5 * float(error @ error)


class TestTrainConfig(SnmnnTestCase):

    def test_defaults(self):
        # type: () -> None
        cfg = TrainConfig().validate()
        self.assertEqual((cfg.eta, cfg.gamma, cfg.epochs, cfg.alpha_mode, cfg.renorm_every),
                         (1e-3, 1.0, 50, 'fixed', 'sample'))
        self.assertTrue(cfg.renormalize_per_sample)
        self.assertEqual(cfg.target, 'velocity')
        self.assertIs(cfg.output_mode, mnn_core.OutputMode.VELOCITY)

    def test_invalid_values(self):
        # type: () -> None
        for changes in ({'eta': 0.0}, {'gamma': -1.0}, {'epochs': 0}, {'alpha_mode': 'random'},
                        {'alpha_value': 1.5}, {'renorm_every': 'never'}, {'hidden': 0},
                        {'seed': -1}, {'target': 'acceleration'}):
            with self.assertRaises(ConfigValidationError, msg=str(changes)):
                TrainConfig(**changes).validate()

    def test_from_file(self):
        # type: () -> None
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'train.conf')
            with open(path, 'w') as f:
                f.write('[train]\neta = 0.01\nepochs = 3\nalpha_mode = learned\n'
                        'spectral_norm = no\nrenorm_every = epoch\n')
            cfg = TrainConfig.from_file(path)
        self.assertEqual(cfg.eta, 0.01)
        self.assertEqual(cfg.epochs, 3)
        self.assertEqual(cfg.alpha_mode, 'learned')
        self.assertFalse(cfg.spectral_norm)
        self.assertFalse(cfg.renormalize_per_sample)

    def test_from_file_without_sections(self):
        # type: () -> None
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'train.conf')
            with open(path, 'w') as f:
                f.write('gamma = 2\nseed = 7\n')
            cfg = TrainConfig.from_file(path)
        self.assertEqual((cfg.gamma, cfg.seed), (2.0, 7))

    def test_target_from_mapping(self):
        # type: () -> None
        cfg = TrainConfig.from_mapping({'target': 'position'})
        self.assertIs(cfg.output_mode, mnn_core.OutputMode.POSITION)
        with self.assertRaisesRegex(ConfigValidationError, 'target'):
            TrainConfig.from_mapping({'target': 'speed'})

    def test_unknown_key(self):
        # type: () -> None
        with self.assertRaisesRegex(ConfigValidationError, 'unknown key'):
            TrainConfig.from_mapping({'eta': '0.1', 'learning_rate': '0.1'})

    def test_bad_number(self):
        # type: () -> None
        with self.assertRaisesRegex(ConfigValidationError, 'epochs'):
            TrainConfig.from_mapping({'epochs': 'many'})


class TestBackprop(SnmnnTestCase):

    def test_matches_central_differences(self):
        # type: () -> None
        h = 1e-5
        rng = np.random.default_rng(42)
        for case in range(100):
            dims = (11, 6, 3) if case % 2 else (11, 5, 4, 3)
            net = random_network(seed=case, dims=dims, gamma=1.0 + case % 3)
            for layer in net.layers:
                layer.alpha = rng.uniform(0.1, 0.9, layer.out_dim)
            for _ in range(3):
                net.forward(random_input(rng))
            snapshot = net.memory_snapshot()
            p = random_input(rng)
            y = rng.uniform(-5.0, 5.0, 3)

            net.restore_memory(snapshot)
            grads = trainer.backprop(net, net.forward(p) - y)

            for layer, grad in zip(net.layers, grads):
                checks = []
                for name, analytic in (('W', grad.dW), ('Q', grad.dQ), ('alpha', grad.dalpha)):
                    array = getattr(layer, name)
                    for _ in range(2):
                        index = tuple(rng.integers(0, size) for size in array.shape)
                        checks.append((array, index, float(analytic[index])))
                for array, index, analytic in checks:
                    original = array[index]
                    array[index] = original + h
                    plus = half_squared_error(net, snapshot, p, y)
                    array[index] = original - h
                    minus = half_squared_error(net, snapshot, p, y)
                    array[index] = original
                    numeric = (plus - minus) / (2.0 * h)
                    self.assertLessEqual(abs(analytic - numeric),
                                         1e-5 * max(abs(analytic), abs(numeric)) + 1e-8,
                                         msg='case {} index {}'.format(case, index))

    def test_needs_a_forward_pass(self):
        # type: () -> None
        net = random_network(seed=0)
        with self.assertRaises(RuntimeError):
            trainer.backprop(net, np.ones(3))


class TestTrain(SnmnnTestCase):

    @classmethod
    def setUpClass(cls):
        # type: () -> None
        plan = uav_sim.TrajectoryPlan(kind='hover', duration_s=20.0, seed=1, wind=True)
        cls.hover = uav_sim.generate_flight(plan, noise=uav_sim.NoiseConfig(sigma_m=0.01, seed=1))

    def test_constraint_holds_after_every_update(self):
        # type: () -> None
        cfg = TrainConfig(epochs=5, eta=1e-2, hidden=20, seed=3)
        net = trainer.init_weights((11, cfg.hidden, 3), seed=cfg.seed)
        worst = []

        def check(net, epoch, sample):
            # type: (mnn_core.MnnNetwork, int, int) -> None
            target = net.layer_target
            worst.append(max(abs(matrix_norm(M) / target - 1.0)
                             for layer in net.layers for M in (layer.W, layer.Q)))

        net, report = trainer.train(net, [log_segment(self.hover)], cfg, on_update=check)
        self.assertGreaterEqual(len(worst), 10000)
        self.assertLessEqual(max(worst), 1e-6)
        self.assertEqual(report.mode, 'spectral')
        self.assertEqual(len(report.per_epoch_loss), 5)

    def test_loss_decreases_on_hover(self):
        # type: () -> None
        cfg = TrainConfig(epochs=4, eta=1e-2, hidden=20)
        net = trainer.init_weights((11, cfg.hidden, 3))
        net, report = trainer.train(net, [log_segment(self.hover)], cfg)
        self.assertLess(report.per_epoch_loss[-1], report.per_epoch_loss[0])
        self.assertTrue(all(math.isfinite(loss) for loss in report.per_epoch_loss))

    def test_single_epoch_loss_table(self):
        # type: () -> None
        cfg = TrainConfig(epochs=1, hidden=8)
        net, report = trainer.train(trainer.init_weights((11, 8, 3)), [log_segment(make_log(100))], cfg)
        table = report.loss_table()
        self.assertEqual(list(table.columns), ['epoch', 'loss'])
        self.assertEqual(table['epoch'].tolist(), [1])

    def test_fixed_alpha_is_applied(self):
        # type: () -> None
        cfg = TrainConfig(epochs=1, hidden=8, alpha_value=0.8)
        net, _ = trainer.train(trainer.init_weights((11, 8, 3)), [log_segment(make_log(60))], cfg)
        for layer in net.layers:
            np.testing.assert_array_equal(layer.alpha, np.full(layer.out_dim, 0.8))

    def test_learned_alpha_stays_in_range(self):
        # type: () -> None
        cfg = TrainConfig(epochs=2, hidden=8, alpha_mode='learned', eta_alpha=0.5)
        net, _ = trainer.train(trainer.init_weights((11, 8, 3)), [log_segment(make_log(200))], cfg)
        for layer in net.layers:
            self.assertTrue(np.all((layer.alpha >= 0.0) & (layer.alpha <= 1.0)))
        self.assertTrue(any(np.any(layer.alpha != 0.5) for layer in net.layers))

    def test_epoch_renormalization(self):
        # type: () -> None
        cfg = TrainConfig(epochs=2, hidden=8, gamma=2.0, renorm_every='epoch', eta=1e-2)
        net, _ = trainer.train(trainer.init_weights((11, 8, 3)), [log_segment(make_log(150))], cfg)
        for layer in net.layers:
            for M in (layer.W, layer.Q):
                self.assertAlmostEqual(matrix_norm(M), 2.0 ** 0.5, delta=1e-6)

    def test_reproducible(self):
        # type: () -> None
        cfg = TrainConfig(epochs=2, hidden=8, seed=5)
        data = [log_segment(make_log(120))]
        first = trainer.train(trainer.init_weights((11, 8, 3), seed=5), data, cfg)
        second = trainer.train(trainer.init_weights((11, 8, 3), seed=5), data, cfg)
        self.assertEqual(first[1], second[1])
        self.assertEqual(mnn_core.serialize(first[0]), mnn_core.serialize(second[0]))

    def test_accepts_pairs(self):
        # type: () -> None
        segment = log_segment(make_log(30))
        pairs = list(zip(segment.inputs, segment.targets))
        net, report = trainer.train(trainer.init_weights((11, 4, 3)), pairs, TrainConfig(epochs=1))
        self.assertEqual(len(report.per_epoch_loss), 1)

    def test_empty_data(self):
        # type: () -> None
        with self.assertRaises(DatasetError):
            trainer.train(trainer.init_weights((11, 4, 3)), [], TrainConfig(epochs=1))

    def test_dimension_mismatch(self):
        # type: () -> None
        with self.assertRaises(DimensionError):
            trainer.train(trainer.init_weights((10, 4, 3)), [log_segment(make_log(30))],
                          TrainConfig(epochs=1))

    def test_unconstrained_divergence_is_reported(self):
        # type: () -> None
        stress = [log_segment(make_log(600, offset=(60.0, -40.0, 30.0)))]
        cfg = TrainConfig(epochs=3, eta=0.5, hidden=32, seed=0)
        net, constrained = trainer.train(trainer.init_weights((11, 32, 3)), stress, cfg)
        self.assertTrue(all(math.isfinite(loss) for loss in constrained.per_epoch_loss))
        constrained_rmse = trainer.evaluate(net, stress)

        cfg.spectral_norm = False
        try:
            net, unconstrained = trainer.train(trainer.init_weights((11, 32, 3)), stress, cfg)
            unconstrained_rmse = trainer.evaluate(net, stress)
            self.assertEqual(unconstrained.mode, 'unconstrained')
        except DivergenceError as e:
            self.assertGreaterEqual(e.epoch, 1)
            unconstrained_rmse = math.inf
        self.assertGreaterEqual(unconstrained_rmse, constrained_rmse)

    def test_velocity_target_uses_the_sample_step(self):
        # type: () -> None
        cfg = TrainConfig(epochs=1, hidden=8)
        net, _ = trainer.train(trainer.init_weights((11, 8, 3)), [log_segment(make_log(60))], cfg)
        self.assertIs(net.output_mode, mnn_core.OutputMode.VELOCITY)
        self.assertAlmostEqual(net.output_dt, 0.01, delta=1e-12)

        cfg = TrainConfig(epochs=1, hidden=8, target='position')
        net, _ = trainer.train(trainer.init_weights((11, 8, 3)), [log_segment(make_log(60))], cfg)
        self.assertIs(net.output_mode, mnn_core.OutputMode.POSITION)
        self.assertEqual(net.output_dt, 1.0)

    def test_short_suite_prediction_rmse(self):
        # type: () -> None
        logs = [uav_sim.generate_flight(plan, noise=uav_sim.NoiseConfig(0.01, plan.seed))
                for plan in uav_sim.fixture_suite(duration_s=8.0)]
        dataset = build_dataset(logs, seed=2, segment_len=200)
        cfg = TrainConfig(epochs=2, hidden=16, seed=2)
        net, report = trainer.train(trainer.init_weights((11, cfg.hidden, 3), seed=cfg.seed),
                                    dataset.train, cfg)
        self.assertTrue(all(math.isfinite(loss) for loss in report.per_epoch_loss))
        self.assertLessEqual(trainer.evaluate(net, dataset.test), 0.05)

    def test_record_split(self):
        # type: () -> None
        logs = [make_log(300, source='a'), make_log(200, radius=2.0, source='b')]
        dataset = build_dataset(logs, seed=7, segment_len=50)
        net, _ = trainer.train(trainer.init_weights((11, 8, 3)), dataset.train,
                               TrainConfig(epochs=1, hidden=8))
        rmse = trainer.record_split(net, dataset)
        self.assertEqual(rmse, trainer.evaluate(net, dataset.test))
        self.assertEqual((net.split_seed, net.split_segment_len, net.holdout_rmse), (7, 50, rmse))

        loaded = mnn_core.deserialize(mnn_core.serialize(net))
        self.assertEqual((loaded.split_seed, loaded.split_segment_len, loaded.holdout_rmse),
                         (7, 50, rmse))

    @unittest.skipUnless(os.environ.get('SNMNN_SLOW_TESTS'), 'set SNMNN_SLOW_TESTS=1 to run')
    def test_fixture_suite_prediction_rmse(self):
        # type: () -> None
        logs = [uav_sim.generate_flight(plan, noise=uav_sim.NoiseConfig(0.01, plan.seed))
                for plan in uav_sim.fixture_suite()]
        dataset = build_dataset(logs)
        net, report = trainer.train(trainer.init_weights(), dataset.train, TrainConfig())
        self.assertLessEqual(trainer.evaluate(net, dataset.test), 0.05)


class TestPredictAndEvaluate(SnmnnTestCase):

    def test_persistence_on_still_log(self):
        # type: () -> None
        segment = log_segment(still_log())
        self.assertEqual(trainer.evaluate(mnn_core.persistence_network(), [segment]), 0.0)

    def test_persistence_matches_step_lengths(self):
        # type: () -> None
        log = make_log(200)
        steps = np.linalg.norm(np.diff(log.position, axis=0), axis=1)
        expected = math.sqrt(float(np.mean(steps * steps)))
        rmse = trainer.evaluate(mnn_core.persistence_network(), [log_segment(log)])
        self.assertAlmostEqual(rmse, expected, delta=1e-12)

    def test_predict_restores_memory(self):
        # type: () -> None
        rng = np.random.default_rng(0)
        net = random_network(seed=3)
        net.forward(random_input(rng))
        snapshot = net.memory_snapshot()
        outputs = trainer.predict(net, [log_segment(make_log(50)), log_segment(make_log(20))])
        self.assertEqual([output.shape for output in outputs], [(49, 3), (19, 3)])
        for (n_state, r_state), layer in zip(snapshot, net.layers):
            np.testing.assert_array_equal(layer.n_state, n_state)
            np.testing.assert_array_equal(layer.r_state, r_state)

    def test_non_finite_prediction_is_infinite_rmse(self):
        # type: () -> None
        net = mnn_core.persistence_network()
        net.layers[0].W = net.layers[0].W * 1e308
        with np.errstate(over='ignore', invalid='ignore'):
            rmse = trainer.evaluate(net, [log_segment(still_log())])
        self.assertEqual(rmse, math.inf)

if __name__ == '__main__':
    unittest.main()
