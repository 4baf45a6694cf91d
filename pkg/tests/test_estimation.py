import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quadfine.errors import ConfigError, SchemaError
from quadfine.estimation import (EstimatedState, EstimatorConfig,
                                 StateEstimator, estimate_rollout,
                                 record_sensor_log)
from quadfine.motions import STANDING_HEIGHT, STANDING_JOINTS
from quadfine.sim import EnvConfig, QuadrupedEnv, RobotModel
from quadfine.sim.sensors import ImuConfig, leg_odometry_velocity

MODEL = RobotModel()
DT = 0.03
G = MODEL.gravity


def scalar_kalman(q, r, v0, p0, accels, meas_lists, dt):
    """Textbook 1-D constant-velocity Kalman filter, one axis."""
    v, p = v0, p0
    out = []
    for a, zs in zip(accels, meas_lists):
        v += a * dt
        p += q
        for z in zs:
            k = p / (p + r)
            v += k * (z - v)
            p *= 1.0 - k
        out.append((v, p))
    return out


def gravity_only_sensors(pitch=0.0):
    """IMU sample for a static robot with a perfect sensor."""
    return {"pitch": pitch, "pitch_rate": 0.0,
            "accel": np.array([np.sin(pitch) * G, np.cos(pitch) * G])}


def standing_env(seed, config=None):
    env = QuadrupedEnv(config=config, seed=seed)
    env.reset(mode="pose",
              q=np.concatenate(([0.0, STANDING_HEIGHT, 0.0],
                                STANDING_JOINTS)))
    return env


class TestFilterCore:
    def test_predict_rotates_specific_force_and_removes_gravity(self):
        est = StateEstimator(MODEL, DT)
        est.reset()
        pitch, f = 0.3, np.array([1.5, -0.4])
        est.predict(pitch, f)
        c, s = np.cos(pitch), np.sin(pitch)
        expected = np.array([c * f[0] - s * f[1],
                             s * f[0] + c * f[1] - G]) * DT
        np.testing.assert_allclose(est.vel, expected, atol=1e-12)

    def test_predict_integrates_position_with_updated_velocity(self):
        est = StateEstimator(MODEL, DT)
        est.reset(position=(1.0, 2.0), velocity=(0.5, 0.0))
        est.predict(0.0, np.array([0.0, G]))  # zero world acceleration
        np.testing.assert_allclose(est.vel, [0.5, 0.0], atol=1e-12)
        np.testing.assert_allclose(est.pos, [1.0 + 0.5 * DT, 2.0],
                                   atol=1e-12)

    def test_static_specific_force_is_a_fixed_point(self):
        est = StateEstimator(MODEL, DT)
        for pitch in (0.0, 0.4, -1.0):
            est.reset()
            for _ in range(100):
                s = gravity_only_sensors(pitch)
                est.predict(s["pitch"], s["accel"])
            np.testing.assert_allclose(est.vel, 0.0, atol=1e-9)

    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_matches_scalar_kalman_per_axis(self, seed):
        rng = np.random.default_rng(seed)
        cfg = EstimatorConfig(process_accel_std=0.4, odometry_std=0.07,
                              initial_velocity_std=0.2)
        est = StateEstimator(MODEL, DT, cfg)
        est.reset(velocity=(0.3, -0.2))
        n = 30
        accels_w = rng.normal(scale=2.0, size=(n, 2))
        meas = [[rng.normal(scale=0.5, size=2)
                 for _ in range(int(rng.integers(0, 3)))] for _ in range(n)]
        # drive at pitch 0 so the body frame equals the world frame
        for i in range(n):
            f = accels_w[i] + np.array([0.0, G])
            est.predict(0.0, f)
            for z in meas[i]:
                est.correct(z)
        q = (cfg.process_accel_std * DT) ** 2
        r = cfg.odometry_std ** 2
        p0 = cfg.initial_velocity_std ** 2
        for axis, v0 in ((0, 0.3), (1, -0.2)):
            ref = scalar_kalman(q, r, v0, p0, accels_w[:, axis],
                                [[z[axis] for z in zs] for zs in meas], DT)
            assert est.vel[axis] == pytest.approx(ref[-1][0], abs=1e-12)
            assert est.P[axis, axis] == pytest.approx(ref[-1][1], abs=1e-14)
        assert est.P[0, 1] == pytest.approx(0.0, abs=1e-15)

    def test_scalar_case_half_gain(self):
        # P=1, R=1, prior 0, measurement 1 -> posterior 0.5 with P=0.5
        cfg = EstimatorConfig(initial_velocity_std=1.0, odometry_std=1.0)
        est = StateEstimator(MODEL, DT, cfg)
        est.reset()
        est.correct(np.array([1.0, 1.0]))
        np.testing.assert_allclose(est.vel, [0.5, 0.5], atol=1e-12)
        np.testing.assert_allclose(np.diag(est.P), [0.5, 0.5], atol=1e-12)

    def test_zero_noise_measurement_snaps_estimate(self):
        cfg = EstimatorConfig(odometry_std=1e-9, initial_velocity_std=1.0)
        est = StateEstimator(MODEL, DT, cfg)
        est.reset(velocity=(3.0, -2.0))
        est.correct(np.array([0.25, 0.5]))
        np.testing.assert_allclose(est.vel, [0.25, 0.5], atol=1e-6)

    def test_infinite_noise_measurement_is_ignored(self):
        cfg = EstimatorConfig(odometry_std=1e9)
        est = StateEstimator(MODEL, DT, cfg)
        est.reset(velocity=(3.0, -2.0))
        est.correct(np.array([0.0, 0.0]))
        np.testing.assert_allclose(est.vel, [3.0, -2.0], atol=1e-9)

    def test_simultaneous_corrections_commute_to_rounding(self):
        def run(measurements):
            est = StateEstimator(MODEL, DT,
                                 EstimatorConfig(initial_velocity_std=0.3))
            est.reset(velocity=(0.4, -0.1))
            for z in measurements:
                est.correct(z)
            return est.vel.copy()

        za, zb = np.array([0.2, 0.05]), np.array([-0.3, 0.15])
        v_ab = run([za, zb])
        v_ba = run([zb, za])
        assert np.linalg.norm(v_ab - v_ba) < 1e-9

    def test_variance_grows_on_predict_shrinks_on_correct(self):
        est = StateEstimator(MODEL, DT)
        est.reset()
        p0 = est.P[0, 0]
        est.predict(0.0, np.array([0.0, G]))
        p1 = est.P[0, 0]
        assert p1 > p0
        est.correct(np.zeros(2))
        assert est.P[0, 0] < p1

    @given(seed=st.integers(0, 2**32 - 1), bias=st.booleans())
    @settings(max_examples=25, deadline=None)
    def test_covariance_stays_symmetric_psd(self, seed, bias):
        rng = np.random.default_rng(seed)
        cfg = EstimatorConfig(estimate_bias=bias)
        est = StateEstimator(MODEL, DT, cfg)
        est.reset()
        for _ in range(40):
            if rng.uniform() < 0.6:
                est.predict(rng.normal(scale=0.5),
                            rng.normal(scale=3.0, size=2))
            else:
                est.correct(rng.normal(scale=0.5, size=2))
            np.testing.assert_allclose(est.P, est.P.T, atol=1e-14)
            assert np.linalg.eigvalsh(est.P).min() >= -1e-12

    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_trace_monotonicity(self, seed):
        rng = np.random.default_rng(seed)
        est = StateEstimator(MODEL, DT)
        est.reset()
        for _ in range(30):
            t0 = float(np.trace(est.P))
            if rng.uniform() < 0.5:
                est.predict(rng.normal(scale=0.5),
                            rng.normal(scale=3.0, size=2))
                assert np.trace(est.P) > t0
            else:
                est.correct(rng.normal(scale=0.5, size=2))
                assert np.trace(est.P) <= t0 + 1e-15

    def test_correction_moves_estimate_toward_measurement(self):
        est = StateEstimator(MODEL, DT)
        est.reset(velocity=(1.0, 0.0))
        before = est.vel[0]
        est.correct(np.array([0.0, 0.0]))
        after = est.vel[0]
        assert 0.0 < after < before

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            EstimatorConfig(process_accel_std=0.0)
        with pytest.raises(ConfigError):
            EstimatorConfig(odometry_std=-1.0)
        with pytest.raises(ConfigError):
            EstimatorConfig(stance_debounce=0)
        with pytest.raises(ConfigError):
            EstimatorConfig(estimate_bias=True, initial_bias_std=0.0)


class TestFaultHandling:
    def test_non_finite_imu_skips_prediction_and_inflates(self):
        est = StateEstimator(MODEL, DT)
        est.reset(position=(1.0, 0.0), velocity=(0.5, 0.5))
        p0 = est.P[0, 0]
        est.predict(0.0, np.array([np.nan, G]))
        np.testing.assert_allclose(est.vel, [0.5, 0.5])
        np.testing.assert_allclose(est.pos, [1.0, 0.0])
        assert est.P[0, 0] > p0 + (0.3 * DT) ** 2  # inflated beyond normal
        assert est.faults == 1
        est.predict(np.inf, np.array([0.0, G]))
        assert est.faults == 2

    def test_non_finite_measurement_is_a_noop(self):
        est = StateEstimator(MODEL, DT)
        est.reset(velocity=(1.0, -1.0))
        P0 = est.P.copy()
        est.correct(np.array([np.nan, 0.0]))
        est.correct(np.array([0.0, np.inf]))
        np.testing.assert_array_equal(est.vel, [1.0, -1.0])
        np.testing.assert_array_equal(est.P, P0)

    def test_faults_reset_with_filter(self):
        est = StateEstimator(MODEL, DT)
        est.reset()
        est.predict(np.nan, np.zeros(2))
        assert est.faults == 1
        est.reset()
        assert est.faults == 0


class TestBiasEstimation:
    def test_constant_bias_is_identified_while_standing(self):
        # true world acceleration is zero; the accelerometer carries a
        # constant bias; stance odometry reads exactly zero velocity
        bias = np.array([0.06, -0.04])
        cfg = EstimatorConfig(estimate_bias=True)
        est = StateEstimator(MODEL, DT, cfg)
        est.reset()
        sensors = {"pitch": 0.0, "pitch_rate": 0.0,
                   "accel": np.array([0.0, G]) + bias}
        stance = np.ones(4, dtype=bool)
        for _ in range(1500):
            est.update(sensors, STANDING_JOINTS, np.zeros(8), stance)
        np.testing.assert_allclose(est.bias, bias, atol=0.01)
        np.testing.assert_allclose(est.vel, 0.0, atol=1e-3)

    def test_bias_off_by_default(self):
        est = StateEstimator(MODEL, DT)
        assert est.bias is None
        s = est.update(gravity_only_sensors(), STANDING_JOINTS, np.zeros(8),
                       np.zeros(4, dtype=bool))
        assert s.accel_bias is None

    def test_bias_state_reported(self):
        est = StateEstimator(MODEL, DT, EstimatorConfig(estimate_bias=True))
        s = est.update(gravity_only_sensors(), STANDING_JOINTS, np.zeros(8),
                       np.zeros(4, dtype=bool))
        assert s.accel_bias.shape == (2,)
        assert est.P.shape == (4, 4)


class TestUpdate:
    def _static_update(self, est, stance):
        return est.update(gravity_only_sensors(), STANDING_JOINTS,
                          np.zeros(8), stance)

    def test_stance_debounce_gates_corrections(self):
        est = StateEstimator(MODEL, DT)
        est.reset(velocity=(1.0, 0.0))
        one_foot = np.array([True, False, False, False])
        no_feet = np.zeros(4, dtype=bool)

        s = self._static_update(est, one_foot)  # first touch: not yet used
        assert not s.stance_used.any()
        assert est.vel[0] == pytest.approx(1.0)
        s = self._static_update(est, one_foot)  # second in a row: used
        assert s.stance_used[0] and s.stance_used.sum() == 1
        assert est.vel[0] < 1.0

        # a break in contact resets the debounce counter
        v = est.vel[0]
        self._static_update(est, no_feet)
        s = self._static_update(est, one_foot)
        assert not s.stance_used.any()
        assert est.vel[0] == pytest.approx(v)

    def test_update_uses_leg_odometry_measurement(self):
        est = StateEstimator(MODEL, DT)
        est.reset()
        joints = STANDING_JOINTS.copy()
        rates = np.linspace(-1.0, 1.0, 8)
        stance = np.array([False, False, True, False])
        sensors = gravity_only_sensors()
        est.update(sensors, joints, rates, stance)
        est.update(sensors, joints, rates, stance)
        hb, lt, lc = MODEL.geom()
        z = leg_odometry_velocity(0.0, 0.0, joints, rates, 2, hb, lt, lc)
        # two identical corrections pull the estimate toward z, never past
        gain = np.abs(est.vel / z)
        assert np.all(gain > 0.0) and np.all(gain < 1.0)

    def test_position_integrates_velocity(self):
        est = StateEstimator(MODEL, DT, EstimatorConfig(use_odometry=False))
        est.reset()
        # constant world acceleration (1, 0): specific force at pitch 0
        sensors = {"pitch": 0.0, "pitch_rate": 0.0,
                   "accel": np.array([1.0, G])}
        for _ in range(30):
            est.update(sensors, STANDING_JOINTS, np.zeros(8),
                       np.zeros(4, dtype=bool))
        assert est.vel[0] == pytest.approx(30 * DT, abs=1e-9)
        # backward-Euler sum: dt * sum_{k=1..30} k*dt
        expected_x = DT * DT * 30 * 31 / 2
        assert est.pos[0] == pytest.approx(expected_x, abs=1e-9)

    def test_estimated_state_layout(self):
        est = StateEstimator(MODEL, DT)
        est.reset(position=(0.5, 0.3), velocity=(0.1, -0.1))
        s = est.update(gravity_only_sensors(0.05), STANDING_JOINTS,
                       np.ones(8), np.ones(4, dtype=bool))
        pose = s.pose()
        vel = s.velocity()
        assert pose.shape == (11,) and vel.shape == (11,)
        assert pose[2] == s.pitch
        np.testing.assert_array_equal(pose[3:], STANDING_JOINTS)
        np.testing.assert_array_equal(vel[3:], np.ones(8))
        np.testing.assert_array_equal(pose[:2], s.root_pos)
        np.testing.assert_array_equal(vel[:2], s.root_vel)


class TestSensorLog:
    def test_recorded_log_has_aligned_channels(self):
        env = standing_env(seed=0)
        hold = env.model.targets_to_action(STANDING_JOINTS)
        log = record_sensor_log(env, lambda obs: hold, n_steps=12)
        assert log["dt"] == pytest.approx(env.control_dt)
        assert log["pitch"].shape == (12,)
        assert log["accel"].shape == (12, 2)
        assert log["joints"].shape == (12, 8)
        assert log["foot_stance"].shape == (12, 4)
        assert log["true_pos"].shape == (12, 2)
        np.testing.assert_array_equal(log["initial_pos"], [0.0,
                                                           STANDING_HEIGHT])

    def test_missing_channel_raises_schema_error(self):
        env = standing_env(seed=0)
        hold = env.model.targets_to_action(STANDING_JOINTS)
        log = record_sensor_log(env, lambda obs: hold, n_steps=5)
        del log["accel"]
        with pytest.raises(SchemaError):
            estimate_rollout(log, model=MODEL)

    def test_misaligned_channel_raises_schema_error(self):
        env = standing_env(seed=0)
        hold = env.model.targets_to_action(STANDING_JOINTS)
        log = record_sensor_log(env, lambda obs: hold, n_steps=5)
        log["joints"] = log["joints"][:3]
        with pytest.raises(SchemaError):
            estimate_rollout(log, model=MODEL)


class TestOnRobot:
    def test_standing_velocity_rmse_small(self):
        env = standing_env(seed=5)
        hold = env.model.targets_to_action(STANDING_JOINTS)
        log = record_sensor_log(env, lambda obs: hold, n_steps=100)
        out = estimate_rollout(log, model=env.model)
        settled = out["vel_err"][34:]  # after ~1 s of convergence
        rmse = float(np.sqrt(np.mean(settled ** 2)))
        assert rmse < 0.05
        assert out["stance_fraction"] > 0.9
        assert out["faults"] == 0

    def test_odometry_beats_dead_reckoning_on_position(self):
        env = standing_env(seed=11)
        hold = env.model.targets_to_action(STANDING_JOINTS)
        log = record_sensor_log(env, lambda obs: hold, n_steps=1000)  # 30 s
        with_od = estimate_rollout(
            log, model=env.model,
            config=EstimatorConfig(use_odometry=True))["pos_drift"]
        without = estimate_rollout(
            log, model=env.model,
            config=EstimatorConfig(use_odometry=False))["pos_drift"]
        assert without > 5.0 * with_od
        assert with_od < 1.0  # under a meter of drift across 30 s

    def test_zero_noise_sensors_track_truth_exactly(self):
        cfg = EnvConfig(imu=ImuConfig(pitch_sigma=0.0, rate_sigma=0.0,
                                      accel_sigma=0.0, accel_bias_range=0.0))
        env = standing_env(seed=3, config=cfg)
        rng = np.random.default_rng(0)
        hold = env.model.targets_to_action(STANDING_JOINTS)

        def wiggle(obs):
            return np.clip(hold + rng.uniform(-0.15, 0.15, 8), -1, 1)

        log = record_sensor_log(env, wiggle, n_steps=30)
        out = estimate_rollout(log, model=env.model,
                               config=EstimatorConfig(use_odometry=False))
        assert out["vel_err"].max() < 1e-6

    def test_velocity_estimate_recovers_from_bad_boot(self):
        env = standing_env(seed=2)
        hold = env.model.targets_to_action(STANDING_JOINTS)
        est = StateEstimator(env.model, env.control_dt)
        est.reset(position=env.q[:2], velocity=(0.5, -0.4))
        for _ in range(30):
            _, info = env.step(hold)
            est.update(info["sensors"], info["pose"][3:],
                       info["velocity"][3:], info["foot_stance"])
        err = np.linalg.norm(est.vel - env.qd[:2])
        assert err < 0.05

    def test_rollout_outputs_are_aligned_and_finite(self):
        env = standing_env(seed=0)
        hold = env.model.targets_to_action(STANDING_JOINTS)
        log = record_sensor_log(env, lambda obs: hold, n_steps=15)
        out = estimate_rollout(log, model=env.model)
        for key in ("true_pos", "est_pos", "true_vel", "est_vel"):
            assert out[key].shape == (15, 2)
            assert np.all(np.isfinite(out[key]))
        assert out["vel_err"].shape == (15,)
        assert out["pos_err"].shape == (15,)
        assert out["vel_rmse"] >= 0.0
        assert out["pos_drift"] >= 0.0


class TestRewardPipeline:
    def test_root_velocity_subreward_error_bounded_by_rmse(self):
        # the imitation root-velocity term computed from the estimate may
        # differ from the truth-computed term, but only in proportion to the
        # velocity estimation error (the term is 1-Lipschitz-ish in the
        # squared error with scale 2)
        from quadfine.rewards import ROOT_LINVEL_SCALE
        env = standing_env(seed=9)
        hold = env.model.targets_to_action(STANDING_JOINTS)
        log = record_sensor_log(env, lambda obs: hold, n_steps=120)
        out = estimate_rollout(log, model=env.model)
        ref = np.zeros(2)  # standing reference root velocity
        worst = 0.0
        for i in range(120):
            r_true = np.exp(-ROOT_LINVEL_SCALE *
                            np.sum((ref - out["true_vel"][i]) ** 2))
            r_est = np.exp(-ROOT_LINVEL_SCALE *
                           np.sum((ref - out["est_vel"][i]) ** 2))
            worst = max(worst, abs(r_true - r_est))
        # exp(-s e^2) has slope bounded by sqrt(2 s / e) -> for small errors
        # the gap is at most ~2 * s * |v| * err; just pin a generous bound
        assert worst <= 4.0 * ROOT_LINVEL_SCALE * out["vel_err"].max()
        assert worst < 0.2  # and in absolute terms it stays small
