"""Observations, rewards, GAE, gradient correctness, and PPO behavior."""

import numpy as np
import pytest

from desktwin import rl
from desktwin.errors import StepOutOfRange
from desktwin.nn import MLP
from desktwin.poses import Pose, quat_exp, quat_normalize

from conftest import make_task


def random_batch(policy, n=32, seed=0):
    rng = np.random.default_rng(seed)
    obs = rng.normal(size=(n, policy.obs_dim))
    mean = policy.actor(obs)
    actions = mean + policy.std() * rng.normal(size=(n, rl.ACT_DIM))
    logp_old = rl.gaussian_logp(actions, mean, policy.log_std)
    # perturb params so the ratio is not identically 1
    flat = policy.get_flat()
    policy.set_flat(flat + rng.normal(0, 1e-3, len(flat)))
    adv = rng.normal(size=n)
    ret = rng.normal(size=n)
    return obs, actions, logp_old, adv, ret


class TestMlp:
    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        net = MLP([5, 8, 3], rng, final_scale=1.0)
        x = rng.normal(size=(7, 5))
        w = rng.normal(size=(7, 3))  # fixed linear readout weights for a scalar loss

        def loss_at(flat):
            net.set_flat(flat)
            return float((net(x) * w).sum())

        out, cache = net.forward(x)
        grads = MLP.flatten_grads(*net.backward(cache, w))
        flat = net.get_flat()
        eps = 1e-6
        idx = rng.choice(len(flat), 25, replace=False)
        for i in idx:
            up = flat.copy(); up[i] += eps
            dn = flat.copy(); dn[i] -= eps
            fd = (loss_at(up) - loss_at(dn)) / (2 * eps)
            assert grads[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)
        net.set_flat(flat)

    def test_flat_round_trip(self):
        rng = np.random.default_rng(1)
        net = MLP([4, 6, 2], rng)
        flat = net.get_flat()
        net.set_flat(flat * 2.0)
        np.testing.assert_allclose(net.get_flat(), flat * 2.0)
        assert net.n_params() == len(flat)


class TestObservation:
    def test_layout_matches_hand_assembly(self, perfect_task):
        factory, plan, target, _ = perfect_task
        env = factory()
        env.reset(seed=0, jitter=False)
        t = len(plan) // 2
        env.t = t
        obs = env.observe()
        assert obs.shape == (rl.OBS_DIM,)
        state = env.state
        frame = plan.target_frame_index[t]
        expected = np.concatenate(
            [
                state.gripper.pose.flat(),
                state.bodies["cube"].pose.flat(),
                [t / (len(plan) - 1)],
                target.pose(frame).flat(),
                plan.grasp.flat(),
                [plan.pre_grasp_offset],
                plan.planned[t].flat(),
            ]
        )
        np.testing.assert_array_equal(obs, expected)

    def test_tau_endpoints(self, perfect_task):
        factory, plan, _, _ = perfect_task
        env = factory()
        obs = env.reset(seed=0, jitter=False)
        assert obs[14] == 0.0
        env.t = len(plan) - 1
        assert env.observe()[14] == 1.0

    def test_step_out_of_range(self, perfect_task):
        factory, plan, target, _ = perfect_task
        env = factory()
        env.reset(seed=0, jitter=False)
        with pytest.raises(StepOutOfRange):
            rl.build_observation(env.state, target, plan, len(plan))

    def test_scratch_mode_zero_pads(self, perfect_task):
        factory, plan, target, w = perfect_task
        env = factory()
        import desktwin.sim as sim

        scratch = rl.ResidualEnv(env.world, target, plan, w, mode="scratch")
        obs = scratch.reset(seed=0, jitter=False)
        assert not obs[22:].any()
        assert obs[:22].any()

    def test_unknown_mode_rejected(self, perfect_task):
        factory, plan, target, w = perfect_task
        env = factory()
        with pytest.raises(ValueError):
            rl.ResidualEnv(env.world, target, plan, w, mode="hybrid")


class TestActions:
    def test_clamp(self):
        a = rl.clamp_action(np.array([1.0, -1.0, 0.01, 5.0, -5.0, 0.1]))
        np.testing.assert_allclose(a, [0.05, -0.05, 0.01, 0.2, -0.2, 0.1])

    def test_zero_residual_identity(self):
        base = Pose([0.1, 0.2, 0.3], quat_normalize([0.5, 0.5, 0.5, 0.5]))
        cmd = rl.apply_residual(base, np.zeros(6), True)
        np.testing.assert_array_equal(cmd.target.p, base.p)
        assert np.linalg.norm(cmd.target.q - base.q) < 1e-12
        assert cmd.close_gripper is True

    def test_translation_residual(self):
        base = Pose([0, 0, 0], [1, 0, 0, 0])
        cmd = rl.apply_residual(base, np.array([0.01, 0, 0, 0, 0, 0]), False)
        np.testing.assert_allclose(cmd.target.p, [0.01, 0, 0])
        np.testing.assert_array_equal(cmd.target.q, [1, 0, 0, 0])

    def test_rotation_residual(self):
        base = Pose([0, 0, 0], [1, 0, 0, 0])
        cmd = rl.apply_residual(base, np.array([0, 0, 0, 0, 0, 0.1]), False)
        assert np.linalg.norm(cmd.target.q - quat_exp([0, 0, 0.1])) < 1e-12


class TestRewards:
    def test_tracking_maximum_and_example(self):
        w = rl.RewardWeights()
        pose = Pose([0, 0, 0], [1, 0, 0, 0])
        assert rl.reward_tracking(pose, pose, w) == pytest.approx(w.w_pos + w.w_ori)
        off = Pose([0.1, 0, 0], [1, 0, 0, 0])
        assert rl.reward_tracking(off, pose, w) == pytest.approx(np.exp(-1.0) + 0.5, abs=1e-9)

    def test_tracking_decay_at_large_error(self):
        w = rl.RewardWeights()
        far = Pose([10.0, 0, 0], [1, 0, 0, 0])
        ref = Pose([0, 0, 0], [1, 0, 0, 0])
        assert rl.reward_tracking(far, ref, w) - w.w_ori < 1e-6

    def test_tracking_bounds_monotonic_sign_invariant(self):
        w = rl.RewardWeights()
        rng = np.random.default_rng(5)
        prev_by_err = {}
        for _ in range(2000):
            q = quat_normalize(rng.normal(size=4))
            p = rng.normal(0, 0.5, 3)
            obj = Pose(p, q)
            ref = Pose(rng.normal(0, 0.5, 3), quat_normalize(rng.normal(size=4)))
            r = rl.reward_tracking(obj, ref, w)
            assert 0 < r <= w.w_pos + w.w_ori + 1e-12
            flipped = Pose(p, -np.asarray(q))
            assert rl.reward_tracking(flipped, ref, w) == pytest.approx(r, abs=1e-12)
        # monotone in position error with orientation fixed
        ref = Pose([0, 0, 0], [1, 0, 0, 0])
        errs = np.linspace(0, 1, 20)
        vals = [rl.reward_tracking(Pose([e, 0, 0], [1, 0, 0, 0]), ref, w) for e in errs]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_grasp_indicator_and_gating(self):
        w = rl.RewardWeights()
        assert rl.reward_grasp([0, 0, 0], [0, 0, 0], True, w) == 0.0
        assert rl.reward_grasp([0.2, 0, 0], [0, 0, 0], True, w) == -w.w_grasp
        assert rl.reward_grasp([0.2, 0, 0], [0, 0, 0], False, w) == 0.0

    def test_plan_additivity(self):
        w = rl.RewardWeights()
        flags = [True, False, True, False, False]
        total = sum(rl.reward_plan(f, w) for f in flags)
        assert total == pytest.approx(-w.w_plan * 3)


class TestGae:
    def test_three_step_hand_computation(self):
        gamma, lam = 0.9, 0.8
        rewards = np.array([[1.0], [2.0], [3.0]])
        values = np.array([[0.5], [1.5], [2.5]])
        dones = np.zeros((3, 1))
        last_v = np.array([3.5])
        adv, ret = rl.compute_gae(rewards, values, dones, last_v, gamma, lam)
        d2 = 3.0 + gamma * 3.5 - 2.5
        d1 = 2.0 + gamma * 2.5 - 1.5
        d0 = 1.0 + gamma * 1.5 - 0.5
        a2 = d2
        a1 = d1 + gamma * lam * a2
        a0 = d0 + gamma * lam * a1
        np.testing.assert_allclose(adv[:, 0], [a0, a1, a2], atol=1e-12)
        np.testing.assert_allclose(ret, adv + values, atol=1e-12)

    def test_lambda_zero_is_td(self):
        rng = np.random.default_rng(6)
        rewards = rng.normal(size=(5, 2))
        values = rng.normal(size=(5, 2))
        dones = np.zeros((5, 2))
        last_v = rng.normal(size=2)
        adv, _ = rl.compute_gae(rewards, values, dones, last_v, 0.9, 0.0)
        next_v = np.vstack([values[1:], last_v[None]])
        np.testing.assert_allclose(adv, rewards + 0.9 * next_v - values, atol=1e-12)

    def test_lambda_one_gamma_one_is_return_minus_value(self):
        rng = np.random.default_rng(7)
        rewards = rng.normal(size=(4, 3))
        values = rng.normal(size=(4, 3))
        dones = np.zeros((4, 3))
        last_v = rng.normal(size=3)
        adv, _ = rl.compute_gae(rewards, values, dones, last_v, 1.0, 1.0)
        ret = rewards[::-1].cumsum(axis=0)[::-1] + last_v[None]
        np.testing.assert_allclose(adv, ret - values, atol=1e-12)

    def test_done_resets_accumulation(self):
        rewards = np.array([[1.0], [1.0]])
        values = np.zeros((2, 1))
        dones = np.array([[1.0], [0.0]])
        last_v = np.array([10.0])
        adv, _ = rl.compute_gae(rewards, values, dones, last_v, 0.9, 0.9)
        assert adv[0, 0] == pytest.approx(1.0)  # terminal: no bootstrap across done


class TestGaussianLogp:
    def test_matches_scipy(self):
        from scipy import stats

        rng = np.random.default_rng(8)
        mean = rng.normal(size=(10, 6))
        log_std = rng.uniform(-2, 0, 6)
        actions = rng.normal(size=(10, 6))
        expect = stats.norm.logpdf(actions, mean, np.exp(log_std)).sum(axis=1)
        got = rl.gaussian_logp(actions, mean, log_std)
        np.testing.assert_allclose(got, expect, atol=1e-10)


class TestPpoGradient:
    def test_matches_finite_differences(self):
        policy = rl.PolicyParameters.init(3, obs_dim=12)
        obs, actions, logp_old, adv, ret = random_batch(policy, seed=9)
        cfg = rl.PpoConfig(seed=0)
        loss, grad = rl.ppo_loss_and_grad(policy, obs, actions, logp_old, adv, ret, cfg)
        flat = policy.get_flat()
        rng = np.random.default_rng(10)
        idx = rng.choice(len(flat), 20, replace=False)
        eps = 1e-6
        for i in idx:
            up = flat.copy(); up[i] += eps
            policy.set_flat(up)
            lu, _ = rl.ppo_loss_and_grad(policy, obs, actions, logp_old, adv, ret, cfg, want_grad=False)
            dn = flat.copy(); dn[i] -= eps
            policy.set_flat(dn)
            ld, _ = rl.ppo_loss_and_grad(policy, obs, actions, logp_old, adv, ret, cfg, want_grad=False)
            fd = (lu - ld) / (2 * eps)
            denom = max(abs(fd), abs(grad[i]), 1e-8)
            assert abs(grad[i] - fd) / denom < 1e-4
        policy.set_flat(flat)

    def test_huge_clip_matches_vanilla_policy_gradient(self):
        policy = rl.PolicyParameters.init(4, obs_dim=10)
        obs, actions, logp_old, adv, ret = random_batch(policy, seed=11)
        cfg = rl.PpoConfig(clip_ratio=1e9, entropy_coef=0.0, value_coef=0.0, seed=0)
        _, grad = rl.ppo_loss_and_grad(policy, obs, actions, logp_old, adv, ret, cfg)

        # independent vanilla PG: d/dtheta of -(ratio * adv).mean()
        n = len(obs)
        mean, cache = policy.actor.forward(obs)
        std = policy.std()
        z = (actions - mean) / std
        logp = (-0.5 * z * z - np.log(std)).sum(axis=1) - 0.5 * rl.ACT_DIM * np.log(2 * np.pi)
        ratio = np.exp(logp - logp_old)
        dlogp = -(adv * ratio) / n
        dmean = dlogp[:, None] * (z / std)
        dws, dbs = policy.actor.backward(cache, dmean)
        vanilla_actor = MLP.flatten_grads(dws, dbs)
        na = policy.actor.n_params()
        np.testing.assert_allclose(grad[:na], vanilla_actor, atol=1e-10)

    def test_non_finite_loss_raises(self):
        policy = rl.PolicyParameters.init(5, obs_dim=8)
        obs = np.full((4, 8), 1.0)
        actions = np.zeros((4, rl.ACT_DIM))
        bad_adv = np.array([np.inf, 0, 0, 0.0])
        with pytest.raises(rl.NonFiniteLoss):
            rl.ppo_loss_and_grad(
                policy, obs, actions, np.zeros(4), bad_adv, np.zeros(4), rl.PpoConfig()
            )


class TestTrainingLoop:
    def test_zero_reward_environment(self, perfect_task):
        factory, plan, target, _ = perfect_task
        w0 = rl.RewardWeights(w_pos=0, w_ori=0, w_grasp=0, w_plan=0)

        def zero_factory():
            env = factory()
            env.weights = w0
            return env

        cfg = rl.PpoConfig(n_envs=2, rollout_steps=len(plan), iterations=2, seed=0)
        policy, curve = rl.ppo_train(zero_factory, cfg)
        assert all(st.mean_return == 0.0 for st in curve)
        assert np.all(policy.log_std >= rl.LOG_STD_MIN) and np.all(policy.log_std <= rl.LOG_STD_MAX)

    def test_deterministic_under_seed(self, perfect_task):
        factory, plan, _, _ = perfect_task
        cfg = rl.PpoConfig(n_envs=2, rollout_steps=len(plan), iterations=2, seed=42)
        p1, c1 = rl.ppo_train(factory, cfg)
        p2, c2 = rl.ppo_train(factory, cfg)
        np.testing.assert_array_equal(p1.get_flat(), p2.get_flat())
        assert [s.mean_return for s in c1] == [s.mean_return for s in c2]

    def test_episode_seeds_distinct(self):
        seeds = {rl._episode_seed(0, i, ep) for i in range(4) for ep in range(4)}
        assert len(seeds) == 16


class TestEvaluate:
    def test_perfect_baseline_zero_policy(self, perfect_task):
        factory, plan, _, _ = perfect_task
        policy = rl.PolicyParameters.init(0, zero=True)
        report = rl.evaluate(policy, factory(), episodes=10, seed=0)
        assert report.success_rate == 1.0
        assert report.mean_final_pos_err < 0.03

    def test_offset_baseline_zero_policy_fails(self, offset_task):
        factory, plan, _, _ = offset_task
        policy = rl.PolicyParameters.init(0, zero=True)
        report = rl.evaluate(policy, factory(), episodes=10, seed=0)
        assert report.success_rate == 0.0

    def test_episode_logs_written(self, perfect_task, tmp_path):
        factory, _, _, _ = perfect_task
        policy = rl.PolicyParameters.init(0, zero=True)
        rl.evaluate(policy, factory(), episodes=2, seed=0, log_dir=tmp_path)
        logs = sorted(tmp_path.glob("episode_*.pwtj"))
        assert len(logs) == 2
        lines = logs[0].read_text().splitlines()
        assert lines[0].startswith("#")
        parts = lines[1].split()
        assert parts[1] == "EE" and parts[9] == "OBJ" and len(parts) == 17


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        policy = rl.PolicyParameters.init(6)
        cfg = rl.PpoConfig(iterations=7, seed=3)
        w = rl.RewardWeights(w_grasp=0.25)
        path = tmp_path / "policy.pwpl"
        rl.save_checkpoint(path, policy, cfg, w)
        back, cfg2, w2 = rl.load_checkpoint(path)
        np.testing.assert_array_equal(back.get_flat(), policy.get_flat())
        assert cfg2.iterations == 7 and cfg2.seed == 3
        assert w2.w_grasp == 0.25
        assert path.read_bytes()[:4] == b"PWPL"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.pwpl"
        path.write_bytes(b"JUNK" + b"\x00" * 32)
        with pytest.raises(ValueError):
            rl.load_checkpoint(path)


class TestCurveCsv:
    def test_format(self, tmp_path):
        curve = [rl.IterationStats(0, 1.5, 0.9, -0.1, 0.0, 0.25)]
        path = tmp_path / "curve.csv"
        rl.save_curve_csv(path, curve)
        lines = path.read_text().splitlines()
        assert lines[0] == "iteration,mean_return,mean_trk,mean_grasp,mean_plan,success_rate"
        assert lines[1].split(",")[0] == "0"
        assert float(lines[1].split(",")[5]) == 0.25
