"""Continuous 2-D warehouse: point-mass agents pushed by four directional forces.

A ``WorldState`` is an immutable value; ``step`` returns a new one.  Agent and
task data are stored as arrays so a whole team integrates in one pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .nn import ContractViolation

SUCCESS_RADIUS = 0.05
SUCCESS_REWARD = 100.0
COLLISION_PENALTY = 2.0


class InfeasibleScenario(RuntimeError):
    pass


@dataclass(frozen=True)
class Physics:
    dt: float = 0.1
    mass: float = 1.0
    damping: float = 0.25
    force_gain: float = 5.0
    v_max: float = 1.0
    radius: float = 0.05
    obstacle_radius: float = 0.05
    contact_stiffness: float = 200.0
    substeps: int = 4
    world_half: float = 1.0
    visible_obstacles: int = 6

    def sub(self) -> "Physics":
        """Parameters for one of ``substeps`` equal slices of a control step."""
        if self.substeps == 1:
            return self
        n = self.substeps
        return replace(self, dt=self.dt / n, damping=1.0 - (1.0 - self.damping) ** (1.0 / n), substeps=1)


@dataclass(frozen=True)
class AgentBody:
    position: np.ndarray
    velocity: np.ndarray
    radius: float = 0.05
    mass: float = 1.0


@dataclass(frozen=True)
class RewardBreakdown:
    success: float
    distance: float
    agent_obstacle: float
    agent_agent: float

    @property
    def total(self) -> float:
        return self.success + self.distance + self.agent_obstacle + self.agent_agent

    def as_dict(self) -> dict:
        return {"success": self.success, "distance": self.distance,
                "agent_obstacle": self.agent_obstacle, "agent_agent": self.agent_agent,
                "total": self.total}


@dataclass(frozen=True)
class WorldState:
    agent_pos: np.ndarray            # (N, 2)
    agent_vel: np.ndarray            # (N, 2)
    task_pos: np.ndarray             # (M, 2)
    task_active: np.ndarray          # (M,) bool
    task_completed_by: np.ndarray    # (M,) int, -1 while active
    obstacle_pos: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    obstacle_radius: np.ndarray = field(default_factory=lambda: np.zeros(0))
    step_index: int = 0
    horizon: int = 100
    physics: Physics = field(default_factory=Physics)

    @property
    def n_agents(self) -> int:
        return len(self.agent_pos)

    @property
    def n_tasks(self) -> int:
        return len(self.task_pos)

    @property
    def obs_dim(self) -> int:
        return obs_dim(self.n_agents, self.n_tasks, self.physics.visible_obstacles)

    @property
    def done(self) -> bool:
        return (not self.task_active.any()) or self.step_index >= self.horizon

    def agent(self, i: int) -> AgentBody:
        return AgentBody(self.agent_pos[i].copy(), self.agent_vel[i].copy(),
                         self.physics.radius, self.physics.mass)


def obs_dim(n_agents: int, n_tasks: int, visible_obstacles: int = 6) -> int:
    return 4 + 2 * n_tasks + 2 * (n_agents - 1) + 2 * visible_obstacles


def build_world(agents: Sequence, tasks: Sequence, obstacles: Sequence = (),
                physics: Physics | None = None, horizon: int = 100,
                velocities: Sequence | None = None) -> WorldState:
    """Convenience constructor from plain coordinate lists; obstacles are (x, y, r)."""
    physics = physics or Physics()
    pos = np.asarray(agents, dtype=np.float64).reshape(-1, 2)
    tasks_arr = np.asarray(tasks, dtype=np.float64).reshape(-1, 2)
    obs = np.asarray(obstacles, dtype=np.float64).reshape(-1, 3)
    vel = (np.zeros_like(pos) if velocities is None
           else np.asarray(velocities, dtype=np.float64).reshape(-1, 2))
    if len(pos) < 1 or len(tasks_arr) < 1:
        raise ContractViolation("a world needs at least one agent and one task")
    return WorldState(pos, vel, tasks_arr, np.ones(len(tasks_arr), dtype=bool),
                      np.full(len(tasks_arr), -1), obs[:, :2].copy(), obs[:, 2].copy(),
                      0, horizon, physics)


# --------------------------------------------------------------------------- dynamics

def action_to_force(u, force_gain: float = 5.0) -> tuple[np.ndarray, bool]:
    """Map (left, right, down, up) commands in [0, 1] to a planar force.

    Returns the force and whether any component had to be clamped.
    """
    u = np.asarray(u, dtype=np.float64)
    clipped = np.clip(u, 0.0, 1.0)
    flagged = bool((clipped != u).any())
    f = force_gain * np.stack([clipped[..., 1] - clipped[..., 0],
                               clipped[..., 3] - clipped[..., 2]], axis=-1)
    return f, flagged


def _integrate(pos: np.ndarray, vel: np.ndarray, force: np.ndarray, ph: Physics):
    vel = (1.0 - ph.damping) * vel + (force / ph.mass) * ph.dt
    speed = np.sqrt((vel * vel).sum(axis=-1, keepdims=True))
    over = speed > ph.v_max
    if over.any():
        vel = np.where(over, vel * (ph.v_max / np.where(over, speed, 1.0)), vel)
    pos = pos + vel * ph.dt
    lim = ph.world_half
    lo, hi = pos < -lim, pos > lim
    if lo.any() or hi.any():
        vel = np.where((lo & (vel < 0)) | (hi & (vel > 0)), 0.0, vel)
        pos = np.clip(pos, -lim, lim)
    return pos, vel


def integrate_dynamics(body: AgentBody, force, physics: Physics) -> AgentBody:
    """One explicit step: damp, accelerate by F/m, clamp speed, move, clamp to the walls."""
    force = np.asarray(force, dtype=np.float64)
    if not np.isfinite(force).all():
        raise ContractViolation("force must be finite")
    ph = replace(physics, mass=body.mass)
    pos, vel = _integrate(np.asarray(body.position, dtype=np.float64)[None],
                          np.asarray(body.velocity, dtype=np.float64)[None], force[None], ph)
    return AgentBody(pos[0], vel[0], body.radius, body.mass)


def _contact(pos: np.ndarray, obstacle_pos: np.ndarray, obstacle_radius: np.ndarray,
             ph: Physics) -> np.ndarray:
    n = len(pos)
    force = np.zeros_like(pos)
    k = ph.contact_stiffness
    if n > 1:
        d = pos[:, None, :] - pos[None, :, :]          # i minus j, pushes i away from j
        dist = np.sqrt((d * d).sum(-1))
        depth = 2 * ph.radius - dist
        np.fill_diagonal(depth, 0.0)
        hit = depth > 0
        if hit.any():
            unit = np.where(dist[..., None] > 0, d / np.where(dist > 0, dist, 1.0)[..., None], 0.0)
            # coincident centres: lower index pushed -x, higher +x
            same = hit & (dist == 0)
            if same.any():
                ii, jj = np.nonzero(same)
                unit[ii, jj] = np.where((ii > jj)[:, None], [1.0, 0.0], [-1.0, 0.0])
            force += (k * np.where(hit, depth, 0.0)[..., None] * unit).sum(axis=1)
    if len(obstacle_pos):
        d = pos[:, None, :] - obstacle_pos[None, :, :]
        dist = np.sqrt((d * d).sum(-1))
        depth = ph.radius + obstacle_radius[None, :] - dist
        hit = depth > 0
        if hit.any():
            safe = np.where(dist > 0, dist, 1.0)
            unit = np.where((dist > 0)[..., None], d / safe[..., None], np.array([1.0, 0.0]))
            force += (k * np.where(hit, depth, 0.0)[..., None] * unit).sum(axis=1)
    return force


def contact_forces(world: WorldState) -> np.ndarray:
    """Penalty forces from overlapping agent-agent and agent-obstacle pairs, shape (N, 2)."""
    return _contact(world.agent_pos, world.obstacle_pos, world.obstacle_radius, world.physics)


# --------------------------------------------------------------------------- reward

def distance_matrix(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    d = a[:, None, :] - b[None, :, :]
    return np.sqrt((d * d).sum(-1))


def newly_completed(before: WorldState, after: WorldState) -> tuple[np.ndarray, np.ndarray]:
    """Tasks active before the step that some agent now sits within the success radius of.

    Returns (mask over tasks, index of the closest agent per task).
    """
    dm = distance_matrix(before.task_pos, after.agent_pos)
    mask = before.task_active & (dm.min(axis=1) < SUCCESS_RADIUS)
    return mask, dm.argmin(axis=1)


def compute_reward(before: WorldState, after: WorldState) -> RewardBreakdown:
    done_now, _ = newly_completed(before, after)
    still = before.task_active & ~done_now
    dm = distance_matrix(after.task_pos, after.agent_pos)
    distance = -float(dm.min(axis=1)[still].sum()) if still.any() else 0.0
    ph = after.physics
    n_obs = 0
    if len(after.obstacle_pos):
        n_obs = int((distance_matrix(after.agent_pos, after.obstacle_pos) < ph.radius).sum())
    n_pairs = 0
    if after.n_agents > 1:
        aa = distance_matrix(after.agent_pos, after.agent_pos)
        n_pairs = int((np.triu(aa < 2 * ph.radius, k=1)).sum())
    return RewardBreakdown(SUCCESS_REWARD * int(done_now.sum()), distance,
                           -COLLISION_PENALTY * n_obs, -COLLISION_PENALTY * n_pairs)


# --------------------------------------------------------------------------- observation

def observe_all(world: WorldState) -> np.ndarray:
    """Observation rows for every agent, shape (N, obs_dim)."""
    pos, n = world.agent_pos, world.n_agents
    k = world.physics.visible_obstacles
    rel_t = (world.task_pos[None, :, :] - pos[:, None, :]) * world.task_active[None, :, None]
    rel_a = pos[None, :, :] - pos[:, None, :]
    others = ~np.eye(n, dtype=bool)
    rel_a = rel_a[others].reshape(n, n - 1, 2)
    rel_o = np.zeros((n, k, 2))
    if len(world.obstacle_pos) and k:
        d = world.obstacle_pos[None, :, :] - pos[:, None, :]
        order = np.argsort((d * d).sum(-1), axis=1, kind="stable")[:, :k]
        near = np.take_along_axis(d, order[..., None], axis=1)
        rel_o[:, :near.shape[1]] = near
    return np.concatenate([pos, world.agent_vel, rel_t.reshape(n, -1),
                           rel_a.reshape(n, -1), rel_o.reshape(n, -1)], axis=1)


def observe(world: WorldState, agent_index: int) -> np.ndarray:
    if not 0 <= agent_index < world.n_agents:
        raise ContractViolation(f"agent index {agent_index} out of range")
    return observe_all(world)[agent_index]


# --------------------------------------------------------------------------- stepping

def step(world: WorldState, joint_action) -> tuple[WorldState, RewardBreakdown, bool, dict]:
    if world.done:
        raise ContractViolation("episode already finished")
    u = np.asarray(joint_action, dtype=np.float64)
    if u.shape != (world.n_agents, 4):
        raise ContractViolation(f"joint action shape {u.shape}, expected ({world.n_agents}, 4)")
    ph = world.physics
    drive, clamped = action_to_force(u, ph.force_gain)
    sub = ph.sub()
    pos, vel = world.agent_pos, world.agent_vel
    for _ in range(ph.substeps):
        f = drive + _contact(pos, world.obstacle_pos, world.obstacle_radius, ph)
        pos, vel = _integrate(pos, vel, f, sub)
    moved = replace(world, agent_pos=pos, agent_vel=vel, step_index=world.step_index + 1)
    reward = compute_reward(world, moved)
    mask, who = newly_completed(world, moved)
    after = moved
    if mask.any():
        completed_by = world.task_completed_by.copy()
        completed_by[mask] = who[mask]
        after = replace(moved, task_active=world.task_active & ~mask, task_completed_by=completed_by)
    events = {
        "completed": [(int(t), int(who[t])) for t in np.flatnonzero(mask)],
        "agent_obstacle": int(round(-reward.agent_obstacle / COLLISION_PENALTY)),
        "agent_agent": int(round(-reward.agent_agent / COLLISION_PENALTY)),
        "clamped_action": clamped,
    }
    return after, reward, after.done, events


def sample_free_points(rng: np.random.Generator, count: int, taken: list[tuple[np.ndarray, float]],
                       clearance: float, margin: float, half: float, retries: int = 10_000) -> np.ndarray:
    """Rejection-sample ``count`` points keeping ``clearance`` plus each taken radius."""
    out = []
    for _ in range(count):
        for _attempt in range(retries):
            p = rng.uniform(-half + margin, half - margin, size=2)
            if all(math.dist(p, q) >= clearance + r for q, r in taken):
                break
        else:
            raise InfeasibleScenario(f"could not place point {len(out) + 1}/{count}: world too crowded")
        taken.append((p, 0.0))
        out.append(p)
    return np.array(out).reshape(-1, 2)
