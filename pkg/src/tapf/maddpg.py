"""Cooperative MADDPG with one shared actor and one centralized critic.

Agents are homogeneous and share the reward, so a single actor maps each
agent's own observation to its four force commands, and a single critic scores
the joint observation plus joint action.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .env import WorldState, observe_all, step
from .nn import (AdamState, MlpParams, TrainingDivergence, adam_step, four_layer,
                 mlp_backward_input, mlp_backward_params, mlp_forward, save_params, soft_update)

log = logging.getLogger(__name__)

ACTION_DIM = 4


@dataclass
class TrainConfig:
    gamma: float = 0.95
    lr: float = 4e-4
    batch_size: int = 1024
    total_steps: int = 1_000_000
    alpha: float = 0.01
    buffer_capacity: int = 1_000_000
    update_every: int = 100
    warmup_steps: int = 10_000
    sigma_start: float = 0.3
    sigma_end: float = 0.05
    decay_steps: int | None = None      # None: first half of training
    eval_every: int = 10_000
    eval_episodes: int = 10
    hidden: int = 128
    reward_scale: float = 1.0           # applied to stored rewards only; logged returns are unscaled
    action_reg: float = 0.0             # L2 weight on actor output pre-activations, keeps the sigmoid unsaturated
    augment: bool = False               # replay samples get a random symmetry of the square arena
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size cannot exceed buffer capacity")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Settings for the 150k-step single-core runs; the defaults are the full-scale ones."""
        base = dict(total_steps=150_000, batch_size=256, update_every=3, hidden=64,
                    action_reg=1e-3, augment=True, eval_every=5_000, eval_episodes=20)
        return cls(**(base | overrides))

    @classmethod
    def corridor(cls, **overrides) -> "TrainConfig":
        """Desk settings with a shorter budget for the fixed corridor layout, which is not mirrored."""
        return cls.desk(**({"total_steps": 60_000, "augment": False} | overrides))

    def sigma(self, env_step: int) -> float:
        decay = self.decay_steps if self.decay_steps is not None else self.total_steps // 2
        if decay <= 0 or env_step >= decay:
            return self.sigma_end
        return self.sigma_start + (self.sigma_end - self.sigma_start) * env_step / decay

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    x: np.ndarray        # (B, N*obs)
    a: np.ndarray        # (B, 4N)
    r: np.ndarray        # (B,)
    x_next: np.ndarray   # (B, N*obs)
    done: np.ndarray     # (B,) float 0/1

    def __len__(self) -> int:
        return len(self.r)


class ReplayBuffer:
    """FIFO ring of joint transitions with uniform sampling."""

    def __init__(self, capacity: int, x_dim: int, a_dim: int):
        self.capacity = int(capacity)
        self.x = np.zeros((self.capacity, x_dim))
        self.a = np.zeros((self.capacity, a_dim))
        self.r = np.zeros(self.capacity)
        self.x_next = np.zeros((self.capacity, x_dim))
        self.done = np.zeros(self.capacity)
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def add(self, x, a, r: float, x_next, done: bool) -> None:
        i = self.inserted % self.capacity
        self.x[i] = np.ravel(x)
        self.a[i] = np.ravel(a)
        self.r[i] = r
        self.x_next[i] = np.ravel(x_next)
        self.done[i] = float(done)
        self.inserted += 1

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        size = len(self)
        if batch_size > size:
            raise ValueError(f"cannot sample {batch_size} from {size} stored transitions")
        idx = rng.choice(size, batch_size, replace=False)
        return Batch(self.x[idx], self.a[idx], self.r[idx], self.x_next[idx], self.done[idx])


# action channel permutations (left, right, down, up) for the arena symmetries
_SWAP_AXES = np.array([2, 3, 0, 1])
_FLIP_X = np.array([1, 0, 2, 3])
_FLIP_Y = np.array([0, 1, 3, 2])


def symmetry_transform(batch: Batch, code: np.ndarray) -> Batch:
    """Apply one of the 8 symmetries of the square per row.

    ``code`` holds integers in [0, 8): bit 0 swaps the axes, bit 1 mirrors x,
    bit 2 mirrors y (applied in that order).  Every observation entry is an
    (x, y) pair, so the joint vectors transform pairwise and the action
    channels are permuted to match.  Rewards and terminal flags are unchanged.
    """
    code = np.asarray(code)
    swap, fx, fy = (code & 1).astype(bool), (code & 2).astype(bool), (code & 4).astype(bool)
    sign = np.stack([np.where(fx, -1.0, 1.0), np.where(fy, -1.0, 1.0)], axis=1)[:, None, :]

    def vec(x):
        v = x.reshape(len(x), -1, 2)
        v = np.where(swap[:, None, None], v[:, :, ::-1], v)
        return (v * sign).reshape(x.shape)

    a = batch.a.reshape(len(code), -1, ACTION_DIM)
    a = np.where(swap[:, None, None], a[:, :, _SWAP_AXES], a)
    a = np.where(fx[:, None, None], a[:, :, _FLIP_X], a)
    a = np.where(fy[:, None, None], a[:, :, _FLIP_Y], a)
    return Batch(vec(batch.x), a.reshape(batch.a.shape), batch.r, vec(batch.x_next), batch.done)


@dataclass
class LearnedPolicy:
    actor: MlpParams
    critic: MlpParams
    target_critic: MlpParams
    config: TrainConfig = field(default_factory=TrainConfig)

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_params(self.actor, d / "actor.bin")
        save_params(self.critic, d / "critic.bin")
        save_params(self.target_critic, d / "target_critic.bin")


def new_policy(n_agents: int, obs_dim: int, config: TrainConfig,
               rng: np.random.Generator) -> LearnedPolicy:
    actor = four_layer(obs_dim, ACTION_DIM, "sigmoid", rng, config.hidden)
    critic = four_layer(n_agents * (obs_dim + ACTION_DIM), 1, "identity", rng, config.hidden)
    return LearnedPolicy(actor, critic, critic.copy(), config)


def actor_act(actor: MlpParams, obs: np.ndarray, sigma: float,
              rng: np.random.Generator | None = None) -> np.ndarray:
    """Actions for one observation (4,) or a stack of them (N, 4)."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    u, _ = mlp_forward(actor, obs)
    if sigma > 0:
        u = u + rng.normal(0.0, sigma, size=u.shape)
    return np.clip(u, 0.0, 1.0)


def _joint_actions(actor: MlpParams, x: np.ndarray, n_agents: int):
    b = len(x)
    obs = x.reshape(b * n_agents, -1)
    u, cache = mlp_forward(actor, obs)
    return u.reshape(b, n_agents * ACTION_DIM), cache


def critic_target(target_critic: MlpParams, actor: MlpParams, batch: Batch,
                  gamma: float, n_agents: int) -> np.ndarray:
    """r + gamma * (1 - done) * Q'(x', pi(o'^1), ..., pi(o'^N)), noise free."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    a_next, _ = _joint_actions(actor, batch.x_next, n_agents)
    q_next, _ = mlp_forward(target_critic, np.concatenate([batch.x_next, a_next], axis=1))
    return batch.r + gamma * (1.0 - batch.done) * q_next[:, 0]


def critic_update(critic: MlpParams, state: AdamState, batch: Batch,
                  targets: np.ndarray) -> tuple[MlpParams, AdamState, float]:
    """One Adam step on mean squared TD error against fixed targets; returns the pre-step loss."""
    q, cache = mlp_forward(critic, np.concatenate([batch.x, batch.a], axis=1))
    resid = q[:, 0] - targets
    loss = float(np.mean(resid * resid))
    if not np.isfinite(loss):
        raise TrainingDivergence(f"critic loss is {loss}; |targets| max {np.abs(targets).max()}")
    grads = mlp_backward_params(critic, cache, (2.0 / len(resid)) * resid[:, None])
    critic, state = adam_step(critic, grads, state)
    return critic, state, loss


def actor_objective_and_grad(actor: MlpParams, critic: MlpParams, batch: Batch,
                             n_agents: int, action_reg: float = 0.0) -> tuple[float, MlpParams]:
    """J = mean over batch and agent slots of Q with that slot's action set to pi(o^n).

    Returns J and dJ/dtheta, accumulated over every slot into the shared actor.
    With ``action_reg`` > 0 the objective also subtracts action_reg times the
    mean squared output pre-activation.
    """
    b = len(batch)
    obs_dim = batch.x.shape[1] // n_agents
    pi, a_cache = mlp_forward(actor, batch.x.reshape(b * n_agents, obs_dim))
    pi = pi.reshape(b, n_agents, ACTION_DIM)
    x_dim = batch.x.shape[1]
    d_pi = np.zeros_like(pi)
    total = 0.0
    scale = 1.0 / (b * n_agents)
    for n in range(n_agents):
        a = batch.a.copy()
        cols = slice(n * ACTION_DIM, (n + 1) * ACTION_DIM)
        a[:, cols] = pi[:, n]
        q, c_cache = mlp_forward(critic, np.concatenate([batch.x, a], axis=1))
        total += float(q.sum())
        dq_din = mlp_backward_input(critic, c_cache, np.full_like(q, scale))
        d_pi[:, n] = dq_din[:, x_dim + n * ACTION_DIM: x_dim + (n + 1) * ACTION_DIM]
    j = total * scale
    d_pre = None
    if action_reg > 0:
        z = a_cache.pre[-1]
        j -= action_reg * float(np.mean(z * z))
        d_pre = (-2.0 * action_reg / z.size) * z
    grads = mlp_backward_params(actor, a_cache, d_pi.reshape(b * n_agents, ACTION_DIM), d_pre)
    return j, grads


def actor_update(actor: MlpParams, critic: MlpParams, state: AdamState, batch: Batch,
                 n_agents: int, action_reg: float = 0.0) -> tuple[MlpParams, AdamState, float]:
    """One Adam step ascending J; returns the objective measured before the step."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    j, grads = actor_objective_and_grad(actor, critic, batch, n_agents, action_reg)
    neg = MlpParams([-w for w in grads.weights], [-b for b in grads.biases], grads.output)
    if not neg.all_finite():
        raise TrainingDivergence("actor gradient is not finite")
    actor, state = adam_step(actor, neg, state)
    return actor, state, j


# --------------------------------------------------------------------------- evaluation

PolicyLike = LearnedPolicy | MlpParams | Callable[[WorldState, np.ndarray], np.ndarray]


def _as_controller(policy: PolicyLike) -> Callable[[WorldState, np.ndarray], np.ndarray]:
    if isinstance(policy, LearnedPolicy):
        policy = policy.actor
    if isinstance(policy, MlpParams):
        actor = policy
        return lambda world, obs: actor_act(actor, obs, 0.0)
    return policy


@dataclass
class EvalReport:
    mean_return: float
    completion_rate: float
    mean_steps_to_completion: float
    agent_agent_collisions: int
    agent_obstacle_collisions: int
    returns: list[float]
    completed: list[bool]
    steps: list[int]
    collision_steps: list[int]          # steps with at least one agent-agent contact
    path_lengths: list[list[float]]
    trajectories: list[np.ndarray]      # (steps + 1, N, 2) per episode

    def summary(self) -> dict:
        return {"mean_return": self.mean_return, "completion_rate": self.completion_rate,
                "mean_steps_to_completion": self.mean_steps_to_completion,
                "agent_agent_collisions": self.agent_agent_collisions,
                "agent_obstacle_collisions": self.agent_obstacle_collisions}


def rollout(controller, world: WorldState) -> dict:
    obs = observe_all(world)
    traj = [world.agent_pos.copy()]
    ret, aa, ao, coll_steps = 0.0, 0, 0, 0
    records = []
    done = world.done
    while not done:
        act = np.asarray(controller(world, obs), dtype=np.float64)
        world, reward, done, events = step(world, act)
        obs = observe_all(world)
        traj.append(world.agent_pos.copy())
        ret += reward.total
        aa += events["agent_agent"]
        ao += events["agent_obstacle"]
        coll_steps += events["agent_agent"] > 0
        records.append({"step": world.step_index, "positions": world.agent_pos.tolist(),
                        "velocities": world.agent_vel.tolist(), "actions": act.tolist(),
                        "reward": reward.as_dict(), "events": events})
    traj = np.array(traj)
    lengths = np.sqrt((np.diff(traj, axis=0) ** 2).sum(-1)).sum(0)
    return {"return": ret, "completed": not world.task_active.any(), "steps": world.step_index,
            "agent_agent": aa, "agent_obstacle": ao, "collision_steps": coll_steps,
            "path_lengths": lengths.tolist(), "trajectory": traj, "log": records, "final": world}


def evaluation_seeds(seed: int, episodes: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence([seed, 7]).generate_state(episodes)]


def evaluate(policy: PolicyLike, scenario: Callable[[int], WorldState], episodes: int,
             seed: int = 0) -> EvalReport:
    """Noise-free rollouts on ``episodes`` scenario draws derived from ``seed``."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    controller = _as_controller(policy)
    runs = [rollout(controller, scenario(s)) for s in evaluation_seeds(seed, episodes)]
    done_steps = [r["steps"] for r in runs if r["completed"]]
    return EvalReport(
        mean_return=float(np.mean([r["return"] for r in runs])),
        completion_rate=float(np.mean([r["completed"] for r in runs])),
        mean_steps_to_completion=float(np.mean(done_steps)) if done_steps else float("nan"),
        agent_agent_collisions=sum(r["agent_agent"] for r in runs),
        agent_obstacle_collisions=sum(r["agent_obstacle"] for r in runs),
        returns=[r["return"] for r in runs],
        completed=[r["completed"] for r in runs],
        steps=[r["steps"] for r in runs],
        collision_steps=[r["collision_steps"] for r in runs],
        path_lengths=[r["path_lengths"] for r in runs],
        trajectories=[r["trajectory"] for r in runs],
    )


# --------------------------------------------------------------------------- training

METRIC_COLUMNS = ("env_step", "episode_return", "discounted_return", "critic_loss",
                  "actor_objective", "eval_return", "completion_rate")


def train(env_factory: Callable[[int], WorldState], config: TrainConfig,
          checkpoint_dir: str | Path | None = None,
          progress: Callable[[dict], None] | None = None) -> tuple[LearnedPolicy, list[dict]]:
    """Run MADDPG for ``config.total_steps`` environment steps.

    ``env_factory(seed)`` must return a fresh world; episode seeds are drawn from
    the config seed, so two runs with the same config are bit-identical.  One
    metrics row is produced per finished episode; evaluation columns are filled
    on the episodes that close an evaluation period and are None elsewhere.
    """
    rng = np.random.default_rng(config.seed)
    probe = env_factory(int(rng.integers(2**31)))
    n, obs_dim = probe.n_agents, probe.obs_dim
    policy = new_policy(n, obs_dim, config, rng)
    actor, critic, target = policy.actor, policy.critic, policy.target_critic
    actor_opt = AdamState.for_params(actor, config.lr)
    critic_opt = AdamState.for_params(critic, config.lr)
    buffer = ReplayBuffer(min(config.buffer_capacity, max(config.total_steps, 1)),
                          n * obs_dim, n * ACTION_DIM)
    metrics: list[dict] = []
    critic_loss = actor_obj = None
    env_step = 0
    next_eval = config.eval_every
    world = probe

    def snapshot():
        return LearnedPolicy(actor, critic, target, config)

    while env_step < config.total_steps:
        obs = observe_all(world)
        ep_ret = disc_ret = 0.0
        t = 0
        done = False
        while not done and env_step < config.total_steps:
            act = actor_act(actor, obs, config.sigma(env_step), rng)
            world, reward, done, _ = step(world, act)
            next_obs = observe_all(world)
            # time-limit truncation is not a terminal state for bootstrapping
            terminal = not world.task_active.any()
            buffer.add(obs, act, config.reward_scale * reward.total, next_obs, terminal)
            obs = next_obs
            ep_ret += reward.total
            disc_ret += config.gamma ** t * reward.total
            t += 1
            env_step += 1
            if (env_step >= config.warmup_steps and env_step % config.update_every == 0
                    and len(buffer) >= config.batch_size):
                batch = buffer.sample(config.batch_size, rng)
                if config.augment:
                    batch = symmetry_transform(batch, rng.integers(8, size=config.batch_size))
                try:
                    y = critic_target(target, actor, batch, config.gamma, n)
                    critic, critic_opt, critic_loss = critic_update(critic, critic_opt, batch, y)
                    actor, actor_opt, actor_obj = actor_update(actor, critic, actor_opt, batch, n,
                                                               config.action_reg)
                except TrainingDivergence:
                    if checkpoint_dir is not None:
                        snapshot().save(Path(checkpoint_dir) / "diverged")
                    raise
                target = soft_update(target, critic, config.alpha)
        row = {"env_step": env_step, "episode_return": ep_ret, "discounted_return": disc_ret,
               "critic_loss": critic_loss, "actor_objective": actor_obj,
               "eval_return": None, "completion_rate": None}
        if env_step >= next_eval or env_step >= config.total_steps:
            report = evaluate(actor, env_factory, config.eval_episodes, config.seed)
            row["eval_return"] = report.mean_return
            row["completion_rate"] = report.completion_rate
            while next_eval <= env_step:
                next_eval += config.eval_every
            log.info("step %d eval return %.2f completion %.2f", env_step,
                     report.mean_return, report.completion_rate)
        metrics.append(row)
        if progress is not None:
            progress(row)
        if env_step < config.total_steps:
            world = env_factory(int(rng.integers(2**31)))
    policy = snapshot()
    if checkpoint_dir is not None:
        policy.save(checkpoint_dir)
    return policy, metrics
