import math
import pickle
import unittest

import numpy as np

from snmnn import uav_sim
from snmnn.custom_exceptions import (
    ConfigValidationError,
    ControllerDivergenceError,
    RotorSpeedError,
    SimulationError,
)
from snmnn.uav_sim import DisturbanceModel, NoiseConfig, TrajectoryPlan, UavParams, UavState

from .snmnn_test_lib import SnmnnTestCase


class TestDynamics(SnmnnTestCase):

    def setUp(self):
        # type: () -> None
        self.params = UavParams()

    def test_hover_force_balance(self):
        # type: () -> None
        state = UavState.at_rest(np.array([0.0, 0.0, 2.0]))
        omega = np.full(4, self.params.hover_omega)
        for k in range(1000):
            state = uav_sim.step(state, omega, self.params, t=k * 1e-3, step_index=k)
        self.assertLess(float(np.linalg.norm(state.v)), 1e-6)
        self.assertLess(float(np.linalg.norm(state.x - [0.0, 0.0, 2.0])), 1e-6)

    def test_free_fall_closed_form(self):
        # type: () -> None
        x0 = np.array([1.0, -2.0, 100.0])
        v0 = np.array([0.5, 0.25, 3.0])
        state = UavState(x=x0, v=v0, R=np.eye(3), Omega=np.zeros(3))
        dt = 1e-3
        for k in range(1000):
            state = uav_sim.step(state, np.zeros(4), self.params, dt=dt, t=k * dt)
        t = 1.0
        expected = x0 + v0 * t - 0.5 * self.params.g * t * t * np.array([0.0, 0.0, 1.0])
        self.assertLess(float(np.linalg.norm(state.x - expected)), 1e-6)
        self.assertLess(float(np.linalg.norm(state.v - (v0 - self.params.g * t * np.array([0, 0, 1])))), 1e-6)

    def test_rotation_stays_orthonormal(self):
        # type: () -> None
        state = UavState(x=np.zeros(3), v=np.zeros(3), R=np.eye(3), Omega=np.array([2.0, -1.0, 3.0]))
        for k in range(1000):
            state = uav_sim.step(state, np.zeros(4), self.params, t=k * 1e-3)
        self.assertLess(float(np.linalg.norm(state.R.T @ state.R - np.eye(3))), 1e-8)
        self.assertAlmostEqual(float(np.linalg.det(state.R)), 1.0, delta=1e-8)

    def test_torque_free_spin(self):
        # type: () -> None
        spin = np.array([0.0, 0.0, 4.0])
        state = UavState(x=np.zeros(3), v=np.zeros(3), R=np.eye(3), Omega=spin)
        for k in range(100):
            state = uav_sim.step(state, np.zeros(4), self.params, t=k * 1e-3)
            self.assertLess(float(np.max(np.abs(state.Omega - spin))), 1e-9)

        J = self.params.J
        Omega0 = np.array([2.0, -1.0, 3.0])
        state = UavState(x=np.zeros(3), v=np.zeros(3), R=np.eye(3), Omega=Omega0)
        momentum = float(np.linalg.norm(J @ Omega0))
        energy = 0.5 * float(Omega0 @ J @ Omega0)
        for k in range(100):
            state = uav_sim.step(state, np.zeros(4), self.params, t=k * 1e-3)
        self.assertAlmostEqual(float(np.linalg.norm(J @ state.Omega)), momentum, delta=1e-9 * momentum)
        self.assertAlmostEqual(0.5 * float(state.Omega @ J @ state.Omega), energy, delta=1e-9 * energy)

    def test_translational_energy_drift(self):
        # type: () -> None
        m, g = self.params.m, self.params.g
        state = UavState(x=np.array([0.0, 0.0, 100.0]), v=np.array([1.0, -0.5, 2.0]), R=np.eye(3),
                         Omega=np.array([0.5, 0.2, -0.3]))

        def energy(s):
            # type: (UavState) -> float
            return 0.5 * m * float(s.v @ s.v) + m * g * float(s.x[2])

        start = energy(state)
        dt = 1e-3
        for k in range(2000):
            state = uav_sim.step(state, np.zeros(4), self.params, dt=dt, t=k * dt)
            self.assertLess(abs(energy(state) - start), 1e-9 * abs(start))

    def test_non_finite_state(self):
        # type: () -> None
        state = UavState(x=np.zeros(3), v=np.array([float('nan'), 0.0, 0.0]), R=np.eye(3),
                         Omega=np.zeros(3))
        with self.assertRaises(SimulationError) as cm:
            uav_sim.step(state, np.zeros(4), self.params, step_index=17)
        self.assertEqual(cm.exception.step, 17)

    def test_invalid_dt(self):
        # type: () -> None
        with self.assertRaises(ConfigValidationError):
            uav_sim.step(UavState.at_rest(), np.zeros(4), self.params, dt=0.0)

    def test_thrust_torque(self):
        # type: () -> None
        omega = np.array([1000.0, 1100.0, 1200.0, 1300.0])
        f_t, tau = uav_sim.thrust_torque(omega, self.params)
        k, l, kd = self.params.K_omega, self.params.l, self.params.K_d
        w1, w2, w3, w4 = [w * w for w in omega]
        self.assertAlmostEqual(f_t, k * (w1 + w2 + w3 + w4), delta=1e-12)
        self.assert_close(tau, [k * l * (w3 - w1), k * l * (w4 - w2), kd * (w2 + w4 - w1 - w3)],
                          rtol=1e-12)

    def test_rotor_speed_range(self):
        # type: () -> None
        for omega in ([-1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 2501.0], [0.0, 0.0, 0.0],
                      [float('nan'), 0.0, 0.0, 0.0]):
            with self.assertRaises(RotorSpeedError):
                uav_sim.thrust_torque(np.array(omega), self.params)

    def test_mixer_inverts_allocation(self):
        # type: () -> None
        omega = np.array([1300.0, 1250.0, 1400.0, 1350.0])
        f_t, tau = uav_sim.thrust_torque(omega, self.params)
        self.assert_close(uav_sim.mixer(f_t, tau, self.params), omega, rtol=1e-9)

    def test_mixer_saturates(self):
        # type: () -> None
        omega = uav_sim.mixer(1e3, np.zeros(3), self.params)
        np.testing.assert_array_equal(omega, np.full(4, self.params.omega_max))
        self.assertTrue(np.all(uav_sim.mixer(0.0, np.array([0.0, 0.0, 1.0]), self.params) >= 0.0))

    def test_hat_and_vee(self):
        # type: () -> None
        w = np.array([0.3, -1.2, 2.0])
        u = np.array([1.0, 0.5, -0.25])
        self.assert_close(uav_sim.hat(w) @ u, np.cross(w, u), rtol=1e-15)
        np.testing.assert_array_equal(uav_sim.vee(uav_sim.hat(w)), w)

    def test_params_validation(self):
        # type: () -> None
        with self.assertRaises(ConfigValidationError):
            UavParams(m=0.0)
        with self.assertRaises(ConfigValidationError):
            UavParams(J=np.diag([1.0, -1.0, 1.0]))


class TestDisturbance(SnmnnTestCase):

    def test_none_is_zero(self):
        # type: () -> None
        f, tau = DisturbanceModel.none()(3.0)
        np.testing.assert_array_equal(f, np.zeros(3))
        np.testing.assert_array_equal(tau, np.zeros(3))

    def test_wind_is_capped_and_seeded(self):
        # type: () -> None
        strong = DisturbanceModel.wind(seed=4, steady=5.0, gust=5.0, torque=1.0)
        for t in np.linspace(0.0, 20.0, 50):
            self.assertLessEqual(float(np.linalg.norm(strong.f_tilde(t))), strong.force_cap + 1e-12)
            self.assertLessEqual(float(np.linalg.norm(strong.tau_tilde(t))), strong.torque_cap + 1e-12)
        a = DisturbanceModel.wind(seed=1)
        b = DisturbanceModel.wind(seed=1)
        np.testing.assert_array_equal(a.f_tilde(1.5), b.f_tilde(1.5))

    def test_picklable(self):
        # type: () -> None
        wind = DisturbanceModel.wind(seed=2)
        clone = pickle.loads(pickle.dumps(wind))
        np.testing.assert_array_equal(clone.f_tilde(2.0), wind.f_tilde(2.0))


class TestTrajectoryPlan(SnmnnTestCase):

    def test_validation(self):
        # type: () -> None
        for changes in ({'kind': 'spiral'}, {'duration_s': 0.0}, {'radius_m': -1.0},
                        {'offset': (0.0, 1.0)}, {'speed_mps': float('inf')}):
            with self.assertRaises(ConfigValidationError, msg=str(changes)):
                TrajectoryPlan(**changes).validate()

    def test_name(self):
        # type: () -> None
        self.assertEqual(TrajectoryPlan(kind='circle', seed=7).name, 'circle-seed7')

    def test_square_corners(self):
        # type: () -> None
        plan = TrajectoryPlan(kind='square', side_m=4.0, speed_mps=1.0, altitude_m=2.0)
        reference = plan.reference()
        self.assert_close(reference(0.0)[0], [-2.0, -2.0, 2.0])
        self.assert_close(reference(4.0)[0], [2.0, -2.0, 2.0])
        self.assert_close(reference(8.0)[0], [2.0, 2.0, 2.0])
        np.testing.assert_allclose(reference(4.0)[1], np.zeros(3), atol=1e-12)

    def test_circle_reference_is_consistent(self):
        # type: () -> None
        plan = TrajectoryPlan(kind='circle', radius_m=2.0, speed_mps=1.0, offset=(1.0, 1.0, 0.0))
        reference = plan.reference()
        h = 1e-5
        for t in (0.5, 1.9, 5.0, 12.0):
            p, v, a = reference(t)
            self.assertAlmostEqual(float(np.linalg.norm(p[0:2] - [1.0, 1.0])), 2.0, delta=1e-12)
            self.assert_close(v, (reference(t + h)[0] - reference(t - h)[0]) / (2 * h), atol=1e-6)
            self.assert_close(a, (reference(t + h)[1] - reference(t - h)[1]) / (2 * h), atol=1e-5)
        self.assertAlmostEqual(float(np.linalg.norm(reference(10.0)[1])), 1.0, delta=1e-12)

    def test_random_plan_is_seeded(self):
        # type: () -> None
        a = TrajectoryPlan(kind='random', seed=4).reference()
        b = TrajectoryPlan(kind='random', seed=4).reference()
        c = TrajectoryPlan(kind='random', seed=5).reference()
        np.testing.assert_array_equal(a(7.3)[0], b(7.3)[0])
        self.assertFalse(np.array_equal(a(7.3)[0], c(7.3)[0]))

    def test_fixture_suite(self):
        # type: () -> None
        suite = uav_sim.fixture_suite()
        self.assertEqual([plan.kind for plan in suite], ['hover', 'square', 'circle', 'random', 'random'])
        self.assertGreaterEqual(sum(plan.duration_s for plan in suite), 300.0)
        self.assertEqual(len({plan.name for plan in suite}), 5)
        stress = uav_sim.fixture_suite(stress=True)
        self.assertTrue(all(plan.offset == uav_sim.STRESS_OFFSET_M for plan in stress))


class TestGenerateFlight(SnmnnTestCase):

    def test_hover_log(self):
        # type: () -> None
        plan = TrajectoryPlan(kind='hover', duration_s=5.0, seed=7)
        log = uav_sim.generate_flight(plan)
        self.assertEqual(len(log), 501)
        self.assertEqual(log.source, 'hover-seed7')
        self.assertAlmostEqual(log.native_rate, 100.0, delta=1e-9)
        log.validate()
        self.assert_close(log.position, np.tile([0.0, 0.0, 2.0], (501, 1)), atol=1e-6)
        hover = UavParams().hover_omega / UavParams().omega_max
        self.assert_close(log.omega_bar, np.full((501, 4), hover), rtol=1e-6)

    def test_deterministic(self):
        # type: () -> None
        plan = TrajectoryPlan(kind='random', duration_s=3.0, seed=3, wind=True)
        noise = NoiseConfig(sigma_m=0.01, seed=3)
        a = uav_sim.generate_flight(plan, noise=noise)
        b = uav_sim.generate_flight(plan, noise=noise)
        np.testing.assert_array_equal(a.position, b.position)
        np.testing.assert_array_equal(a.omega_bar, b.omega_bar)
        np.testing.assert_array_equal(a.quat, b.quat)

    def test_position_noise(self):
        # type: () -> None
        plan = TrajectoryPlan(kind='hover', duration_s=10.0)
        clean = uav_sim.generate_flight(plan)
        noisy = uav_sim.generate_flight(plan, noise=NoiseConfig(sigma_m=0.05, seed=1))
        residual = noisy.position - clean.position
        self.assertAlmostEqual(float(np.std(residual)), 0.05, delta=0.005)
        np.testing.assert_array_equal(noisy.quat, clean.quat)

    def test_circle_tracking(self):
        # type: () -> None
        plan = TrajectoryPlan(kind='circle', duration_s=12.0, radius_m=2.0, wind=True)
        log = uav_sim.generate_flight(plan)
        late = log.t > 6.0
        radii = np.linalg.norm(log.position[late, 0:2], axis=1)
        self.assertLess(float(np.max(np.abs(radii - 2.0))), 0.2)
        self.assertTrue(np.all(np.abs(np.linalg.norm(log.quat, axis=1) - 1.0) < 1e-9))
        self.assertTrue(np.all(log.quat[:, 0] >= 0.0))

    def test_divergence_bound(self):
        # type: () -> None
        plan = TrajectoryPlan(kind='circle', duration_s=2.0)
        with self.assertRaises(ControllerDivergenceError):
            uav_sim.generate_flight(plan, divergence_bound_m=1e-9)

    def test_log_rate_must_divide_physics_rate(self):
        # type: () -> None
        with self.assertRaises(ConfigValidationError):
            uav_sim.generate_flight(TrajectoryPlan(duration_s=1.0), log_rate_hz=300.0)

    def test_noise_validation(self):
        # type: () -> None
        with self.assertRaises(ConfigValidationError):
            NoiseConfig(sigma_m=-0.1).validate()
        self.assertTrue(math.isfinite(NoiseConfig().sigma_m))

if __name__ == '__main__':
    unittest.main()
