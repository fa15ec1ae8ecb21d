"""SVG trajectory plots of recorded episodes."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .env import WorldState

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

SIZE = 600  # pixels per side


def _px(world: WorldState, p) -> tuple[float, float]:
    half = world.physics.world_half
    scale = SIZE / (2 * half)
    return (p[0] + half) * scale, (half - p[1]) * scale


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def trajectory_from_log(log: Sequence[dict], world: WorldState) -> np.ndarray:
    """Positions (steps + 1, N, 2) from per-step log records, starting at ``world``."""
    return np.array([world.agent_pos] + [r["positions"] for r in log], dtype=float)


def render_trajectories(trajectory, world: WorldState, title: str = "") -> str:
    """SVG of agent paths over the initial ``world``.

    ``trajectory`` is either an array (steps + 1, N, 2) or a list of per-step
    log records as produced by rollout.  Output depends only on the inputs.
    """
    if len(trajectory) == 0:
        raise ValueError("empty episode log")
    if isinstance(trajectory[0], dict):
        trajectory = trajectory_from_log(trajectory, world)
    traj = np.asarray(trajectory, dtype=float)
    scale = SIZE / (2 * world.physics.world_half)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" '
           f'viewBox="0 0 {SIZE} {SIZE}">',
           f'<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="white" stroke="black"/>']
    if title:
        out.append(f'<title>{title}</title>')
    for (x, y), r in zip(world.obstacle_pos, world.obstacle_radius):
        cx, cy = _px(world, (x, y))
        out.append(f'<circle class="obstacle" cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="{_fmt(r * scale)}" '
                   'fill="#444444"/>')
    for j, t in enumerate(world.task_pos):
        cx, cy = _px(world, t)
        out.append(f'<circle class="task" cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="4" fill="gold" '
                   f'stroke="black" data-task="{j}"/>')
    for i in range(traj.shape[1]):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in (_px(world, p) for p in traj[:, i]))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2" '
                   f'data-agent="{i}"/>')
        sx, sy = _px(world, traj[0, i])
        out.append(f'<rect class="start" x="{_fmt(sx - 4)}" y="{_fmt(sy - 4)}" width="8" height="8" '
                   f'fill="{color}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
