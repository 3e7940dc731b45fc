"""Object-centric residual policy learning: observations, rewards, a Gaussian
MLP actor-critic, GAE, and a from-scratch PPO loop over the world model."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import NonFiniteLoss, StepOutOfRange
from .nn import MLP
from .poses import BaselinePlan, Pose, PoseTrajectory, quat_distance, quat_exp, quat_mul, quat_normalize
from .sim import Command, SimConfig, World, WorldState

CHECKPOINT_MAGIC = b"PWPL"

OBS_DIM = 37  # ee(7) obj(7) tau(1) target(7) grasp(7) d_pre(1) base(7)
ACT_DIM = 6
POS_CLAMP = 0.05
ROT_CLAMP = 0.2
LOG_STD_MIN = -4.0
LOG_STD_MAX = 1.0
# std ~0.05: explores the full clamp range without saturating it, and keeps
# |p_cmd - p_ee| inside the reachability margin so commands stay feasible
LOG_STD_INIT = -3.0
HIDDEN = (64, 64)

SUCCESS_POS_TOL = 0.03
SUCCESS_ORI_TOL = 0.3


@dataclass(frozen=True)
class RewardWeights:
    w_pos: float = 1.0
    k_pos: float = 10.0
    w_ori: float = 0.5
    k_ori: float = 2.0
    w_grasp: float = 0.5
    tau_dist: float = 0.1
    w_plan: float = 0.1

    def __post_init__(self):
        if min(self.w_pos, self.w_ori, self.w_grasp, self.w_plan) < 0:
            raise ValueError("reward weights must be >= 0")
        if self.tau_dist <= 0:
            raise ValueError("grasp distance threshold must be positive")


@dataclass
class PpoConfig:
    clip_ratio: float = 0.2
    gae_lambda: float = 0.95
    gamma: float = 0.99
    learning_rate: float = 3e-4
    epochs: int = 4
    minibatch_size: int = 256
    n_envs: int = 8
    rollout_steps: int = 256
    iterations: int = 100
    entropy_coef: float = 0.003
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("lambda must lie in [0, 1]")
        if self.clip_ratio <= 0:
            raise ValueError("clip ratio must be positive")


def build_observation(
    world: WorldState, target: PoseTrajectory, plan: BaselinePlan, t: int
) -> np.ndarray:
    """Flattened policy observation in the fixed field order."""
    n = len(plan)
    if not 0 <= t < n:
        raise StepOutOfRange(f"step {t} outside episode of length {n}")
    tracked = world.world.scene.objects[0].name
    obj_pose = world.bodies[tracked].pose
    frame = plan.target_frame_index[t] if plan.target_frame_index else min(t, len(target) - 1)
    tau = t / (n - 1) if n > 1 else 0.0
    return np.concatenate(
        [
            world.gripper.pose.flat(),
            obj_pose.flat(),
            [tau],
            target.pose(frame).flat(),
            plan.grasp.flat(),
            [plan.pre_grasp_offset],
            plan.planned[t].flat(),
        ]
    )


def clamp_action(action: np.ndarray) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64).reshape(ACT_DIM).copy()
    a[:3] = np.clip(a[:3], -POS_CLAMP, POS_CLAMP)
    a[3:] = np.clip(a[3:], -ROT_CLAMP, ROT_CLAMP)
    return a


def apply_residual(base: Pose, action: np.ndarray, close_gripper: bool) -> Command:
    """Command = baseline refined by the clamped residual (p + dp, exp(w) * q)."""
    a = clamp_action(action)
    p = base.p + a[:3]
    q = quat_normalize(quat_mul(quat_exp(a[3:]), base.q))
    return Command(Pose(p, q), close_gripper)


def reward_tracking(obj: Pose, target: Pose, w: RewardWeights) -> float:
    pos_err = float(np.linalg.norm(obj.p - target.p))
    ori_err = quat_distance(obj.q, target.q)
    return w.w_pos * np.exp(-w.k_pos * pos_err) + w.w_ori * np.exp(-w.k_ori * ori_err)


def reward_grasp(ee_p, obj_p, holding_phase: bool, w: RewardWeights) -> float:
    if holding_phase and np.linalg.norm(np.asarray(ee_p) - np.asarray(obj_p)) > w.tau_dist:
        return -w.w_grasp
    return 0.0


def reward_plan(feasible: bool, w: RewardWeights) -> float:
    return 0.0 if feasible else -w.w_plan


def quat_angle(q1, q2) -> float:
    dot = float(np.clip(abs(np.asarray(q1) @ np.asarray(q2)), -1.0, 1.0))
    return 2.0 * np.arccos(dot)


class ResidualEnv:
    """One episode of the world model driven by residual (or absolute) actions."""

    def __init__(
        self,
        world: World,
        target: PoseTrajectory,
        plan: BaselinePlan,
        weights: RewardWeights,
        mode: str = "residual",
    ):
        if mode not in ("residual", "scratch"):
            raise ValueError(f"unknown mode {mode!r}")
        self.world = world
        self.target = target
        self.plan = plan
        self.weights = weights
        self.mode = mode
        self.tracked = world.scene.objects[0].name
        self.state: WorldState | None = None
        self.t = 0
        # first step where the target frame starts advancing; the learning-curve
        # tracking component covers this trajectory-following window only (the
        # approach phases hold the target at frame 0, where a resting object
        # scores highly without doing anything)
        idx = plan.target_frame_index
        self.track_start = next(
            (t for t in range(len(idx) - 1) if idx[t + 1] != idx[t]), 0
        )

    def __len__(self) -> int:
        return len(self.plan)

    def reset(self, seed: int = 0, jitter: bool = True) -> np.ndarray:
        self.state = self.world.reset(seed, jitter=jitter)
        self.t = 0
        return self.observe()

    def observe(self) -> np.ndarray:
        obs = build_observation(self.state, self.target, self.plan, self.t)
        if self.mode == "scratch":
            obs = obs.copy()
            obs[22:] = 0.0  # zero-pad grasp, d_pre, baseline fields
        return obs

    def step(self, action: np.ndarray):
        t = self.t
        close = self.plan.gripper_schedule[t]
        base = self.plan.planned[t] if self.mode == "residual" else self.state.gripper.pose
        cmd = apply_residual(base, action, close)
        new_state, info = self.world.step(self.state, cmd)
        self.state = new_state

        w = self.weights
        frame = self.plan.target_frame_index[t]
        target_pose = self.target.pose(frame)
        obj_pose = new_state.bodies[self.tracked].pose
        r_trk = reward_tracking(obj_pose, target_pose, w)
        r_grasp = reward_grasp(
            new_state.gripper.pose.p, obj_pose.p, t >= self.plan.close_step, w
        )
        r_plan = reward_plan(info.feasible, w)

        self.t += 1
        done = self.t >= len(self.plan)
        obs = None if done else self.observe()
        comps = {
            "trk": r_trk if t >= self.track_start else 0.0,
            "grasp": r_grasp,
            "plan": r_plan,
        }
        step_info = {"feasible": info.feasible}
        if done:
            final_target = self.target.pose(len(self.target) - 1)
            pos_err = float(np.linalg.norm(obj_pose.p - final_target.p))
            ori_err = quat_angle(obj_pose.q, final_target.q)
            step_info.update(
                final_pos_err=pos_err,
                final_ori_err=ori_err,
                success=pos_err <= SUCCESS_POS_TOL and ori_err <= SUCCESS_ORI_TOL,
            )
        return obs, r_trk + r_grasp + r_plan, comps, done, step_info


@dataclass
class PolicyParameters:
    actor: MLP
    critic: MLP
    log_std: np.ndarray
    obs_dim: int = OBS_DIM
    act_dim: int = ACT_DIM

    @classmethod
    def init(cls, seed: int, obs_dim: int = OBS_DIM, zero: bool = False) -> "PolicyParameters":
        rng = np.random.Generator(np.random.PCG64(seed))
        actor = MLP([obs_dim, *HIDDEN, ACT_DIM], rng)
        critic = MLP([obs_dim, *HIDDEN, 1], rng)
        log_std = np.full(ACT_DIM, LOG_STD_INIT)
        if zero:
            actor.set_flat(np.zeros(actor.n_params()))
            critic.set_flat(np.zeros(critic.n_params()))
        return cls(actor, critic, log_std, obs_dim)

    def std(self) -> np.ndarray:
        return np.exp(np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX))

    def mean_action(self, obs: np.ndarray) -> np.ndarray:
        return self.actor(obs)[0]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.actor.get_flat(), self.critic.get_flat(), self.log_std])

    def set_flat(self, flat: np.ndarray) -> None:
        na = self.actor.n_params()
        nc = self.critic.n_params()
        self.actor.set_flat(flat[:na])
        self.critic.set_flat(flat[na : na + nc])
        self.log_std = flat[na + nc :].copy()


def gaussian_logp(actions: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    std = np.exp(np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX))
    z = (actions - mean) / std
    return (-0.5 * z * z - np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)).sum(axis=1) - 0.5 * actions.shape[1] * np.log(2 * np.pi)


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    last_values: np.ndarray,
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Time-major GAE over (T, n_env) arrays; returns (advantages, returns)."""
    t_steps, n_env = rewards.shape
    adv = np.zeros((t_steps, n_env))
    last_gae = np.zeros(n_env)
    for t in reversed(range(t_steps)):
        next_v = last_values if t == t_steps - 1 else values[t + 1]
        non_terminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * non_terminal - values[t]
        last_gae = delta + gamma * lam * non_terminal * last_gae
        adv[t] = last_gae
    return adv, adv + values


def ppo_loss_and_grad(
    policy: PolicyParameters,
    obs: np.ndarray,
    actions: np.ndarray,
    logp_old: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    cfg: PpoConfig,
    want_grad: bool = True,
):
    """Clipped-surrogate PPO loss and its exact analytic gradient (flat)."""
    n = len(obs)
    mean, cache_a = policy.actor.forward(obs)
    values, cache_c = policy.critic.forward(obs)
    values = values[:, 0]
    log_std_eff = np.clip(policy.log_std, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(log_std_eff)

    z = (actions - mean) / std
    logp = (-0.5 * z * z - log_std_eff).sum(axis=1) - 0.5 * ACT_DIM * np.log(2 * np.pi)
    ratio = np.exp(logp - logp_old)
    surr1 = ratio * advantages
    clipped = np.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio)
    surr2 = clipped * advantages
    policy_loss = -np.minimum(surr1, surr2).mean()
    entropy = (log_std_eff + 0.5 * np.log(2 * np.pi * np.e)).sum()
    value_err = values - returns
    value_loss = (value_err**2).mean()
    loss = policy_loss - cfg.entropy_coef * entropy + cfg.value_coef * value_loss
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss = {loss}")
    if not want_grad:
        return float(loss), None

    # d(policy_loss)/d(logp): only where the unclipped branch is active
    active = (surr1 <= surr2).astype(np.float64)
    dlogp = -(advantages * ratio * active) / n
    dmean = dlogp[:, None] * (z / std)
    dlogstd_policy = (dlogp[:, None] * (z * z - 1.0)).sum(axis=0)
    dlogstd = dlogstd_policy - cfg.entropy_coef * np.ones(ACT_DIM)
    # clamp pass-through: zero gradient where the clamp binds
    inside = (policy.log_std > LOG_STD_MIN) & (policy.log_std < LOG_STD_MAX)
    dlogstd = dlogstd * inside

    dvalues = cfg.value_coef * 2.0 * value_err[:, None] / n
    dwa, dba = policy.actor.backward(cache_a, dmean)
    dwc, dbc = policy.critic.backward(cache_c, dvalues)
    grad = np.concatenate(
        [MLP.flatten_grads(dwa, dba), MLP.flatten_grads(dwc, dbc), dlogstd]
    )
    return float(loss), grad


@dataclass
class IterationStats:
    iteration: int
    mean_return: float
    mean_trk: float
    mean_grasp: float
    mean_plan: float
    success_rate: float


def save_curve_csv(path: str | Path, curve: list) -> None:
    lines = ["iteration,mean_return,mean_trk,mean_grasp,mean_plan,success_rate"]
    for rec in curve:
        lines.append(
            f"{rec.iteration},{rec.mean_return:.10g},{rec.mean_trk:.10g},"
            f"{rec.mean_grasp:.10g},{rec.mean_plan:.10g},{rec.success_rate:.10g}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


class _Adam:
    def __init__(self, n: int, lr: float):
        self.lr = lr
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = 0.9 * self.m + 0.1 * grad
        self.v = 0.999 * self.v + 0.001 * grad * grad
        m_hat = self.m / (1 - 0.9**self.t)
        v_hat = self.v / (1 - 0.999**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + 1e-8)


def _episode_seed(base_seed: int, env_index: int, episode: int) -> int:
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=(env_index, episode))
    return int(ss.generate_state(1)[0])


def ppo_train(
    env_factory,
    cfg: PpoConfig,
    policy: PolicyParameters | None = None,
    jitter: bool = True,
) -> tuple[PolicyParameters, list]:
    """Trains a residual policy with PPO over parallel episodic environments.

    env_factory() must build a fresh ResidualEnv; determinism follows entirely
    from cfg.seed (sampling, minibatch shuffles, and per-episode reset seeds).
    """
    envs = [env_factory() for _ in range(cfg.n_envs)]
    obs_dim = len(envs[0].reset(0, jitter=False))
    if policy is None:
        policy = PolicyParameters.init(cfg.seed, obs_dim)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    adam = _Adam(len(policy.get_flat()), cfg.learning_rate)

    episode_counts = [0] * cfg.n_envs
    cur_obs = []
    for i, env in enumerate(envs):
        cur_obs.append(env.reset(_episode_seed(cfg.seed, i, 0), jitter=jitter))
        episode_counts[i] = 1
    cur_obs = np.array(cur_obs)

    curve: list[IterationStats] = []
    for iteration in range(cfg.iterations):
        t_steps = cfg.rollout_steps
        obs_buf = np.zeros((t_steps, cfg.n_envs, obs_dim))
        act_buf = np.zeros((t_steps, cfg.n_envs, ACT_DIM))
        logp_buf = np.zeros((t_steps, cfg.n_envs))
        rew_buf = np.zeros((t_steps, cfg.n_envs))
        done_buf = np.zeros((t_steps, cfg.n_envs))
        val_buf = np.zeros((t_steps, cfg.n_envs))
        comp_sums = {"trk": 0.0, "grasp": 0.0, "plan": 0.0}
        ep_returns = []
        ep_successes = []
        ep_accum = np.zeros(cfg.n_envs)

        for t in range(t_steps):
            mean = policy.actor(cur_obs)
            std = policy.std()
            eps = rng.standard_normal((cfg.n_envs, ACT_DIM))
            actions = mean + std * eps
            logp = gaussian_logp(actions, mean, policy.log_std)
            values = policy.critic(cur_obs)[:, 0]

            obs_buf[t] = cur_obs
            act_buf[t] = actions
            logp_buf[t] = logp
            val_buf[t] = values

            for i, env in enumerate(envs):
                obs_next, r, comps, done, step_info = env.step(actions[i])
                rew_buf[t, i] = r
                done_buf[t, i] = float(done)
                for k in comp_sums:
                    comp_sums[k] += comps[k]
                ep_accum[i] += r
                if done:
                    ep_returns.append(ep_accum[i])
                    ep_successes.append(bool(step_info.get("success", False)))
                    ep_accum[i] = 0.0
                    obs_next = env.reset(
                        _episode_seed(cfg.seed, i, episode_counts[i]), jitter=jitter
                    )
                    episode_counts[i] += 1
                cur_obs[i] = obs_next

        last_values = policy.critic(cur_obs)[:, 0]
        adv, rets = compute_gae(
            rew_buf, val_buf, done_buf, last_values, cfg.gamma, cfg.gae_lambda
        )

        n_total = t_steps * cfg.n_envs
        flat_obs = obs_buf.reshape(n_total, obs_dim)
        flat_act = act_buf.reshape(n_total, ACT_DIM)
        flat_logp = logp_buf.reshape(n_total)
        flat_adv = adv.reshape(n_total)
        flat_ret = rets.reshape(n_total)
        flat_adv = (flat_adv - flat_adv.mean()) / (flat_adv.std() + 1e-8)

        mb = min(cfg.minibatch_size, n_total)
        for _ in range(cfg.epochs):
            order = rng.permutation(n_total)
            for start in range(0, n_total, mb):
                idx = order[start : start + mb]
                _, grad = ppo_loss_and_grad(
                    policy,
                    flat_obs[idx],
                    flat_act[idx],
                    flat_logp[idx],
                    flat_adv[idx],
                    flat_ret[idx],
                    cfg,
                )
                norm = np.linalg.norm(grad)
                if norm > cfg.max_grad_norm:
                    grad = grad * (cfg.max_grad_norm / norm)
                policy.set_flat(adam.step(policy.get_flat(), grad))

        n_eps = max(len(ep_returns), 1)
        curve.append(
            IterationStats(
                iteration,
                float(np.mean(ep_returns)) if ep_returns else float(rew_buf.sum(axis=0).mean()),
                comp_sums["trk"] / n_total,
                comp_sums["grasp"] / n_total,
                comp_sums["plan"] / n_total,
                sum(ep_successes) / n_eps if ep_successes else 0.0,
            )
        )
    return policy, curve


@dataclass
class SuccessReport:
    success_rate: float
    mean_final_pos_err: float
    mean_final_ori_err: float
    mean_episode_reward: float
    episodes: int


def evaluate(
    policy: PolicyParameters,
    env: ResidualEnv,
    episodes: int = 10,
    seed: int = 0,
    jitter: bool = True,
    log_dir: str | Path | None = None,
) -> SuccessReport:
    """Deterministic mean-action rollouts over jittered resets."""
    successes = 0
    pos_errs = []
    ori_errs = []
    rewards = []
    for ep in range(episodes):
        obs = env.reset(_episode_seed(seed, 0, ep), jitter=jitter)
        total = 0.0
        log_lines = []
        done = False
        while not done:
            action = policy.mean_action(obs)
            if log_dir is not None:
                st = env.state
                tracked = st.bodies[env.tracked].pose
                log_lines.append(
                    "EE "
                    + " ".join(f"{v:.9g}" for v in st.gripper.pose.flat())
                    + " OBJ "
                    + " ".join(f"{v:.9g}" for v in tracked.flat())
                )
            obs, r, _, done, step_info = env.step(action)
            total += r
        rewards.append(total)
        pos_errs.append(step_info["final_pos_err"])
        ori_errs.append(step_info["final_ori_err"])
        if step_info["success"]:
            successes += 1
        if log_dir is not None:
            path = Path(log_dir) / f"episode_{ep:03d}.pwtj"
            lines = ["# PWTJ episode log: record-type, pose fields"]
            for t, line in enumerate(log_lines):
                lines.append(f"{t} {line}")
            path.write_text("\n".join(lines) + "\n")
    return SuccessReport(
        successes / episodes,
        float(np.mean(pos_errs)),
        float(np.mean(ori_errs)),
        float(np.mean(rewards)),
        episodes,
    )


def save_checkpoint(
    path: str | Path, policy: PolicyParameters, cfg: PpoConfig, weights: RewardWeights
) -> None:
    """PWPL container: magic, JSON header (dims + configs), f64 flat parameters."""
    header = {
        "obs_dim": policy.obs_dim,
        "act_dim": policy.act_dim,
        "actor_sizes": policy.actor.sizes,
        "critic_sizes": policy.critic.sizes,
        "ppo": asdict(cfg),
        "rewards": asdict(weights),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    flat = policy.get_flat()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<Q", len(flat)))
        f.write(flat.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[PolicyParameters, PpoConfig, RewardWeights]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen))
        (n,) = struct.unpack("<Q", f.read(8))
        flat = np.frombuffer(f.read(8 * n), dtype="<f8").copy()
    policy = PolicyParameters.init(0, header["obs_dim"])
    policy.set_flat(flat)
    cfg = PpoConfig(**header["ppo"])
    weights = RewardWeights(**header["rewards"])
    return policy, cfg, weights
