"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import math
from collections import deque

import numpy as np


def dense_forward(weights, biases, output, x, dtype=np.float64):
    """Plain matrix arithmetic forward pass, optionally in extended precision."""
    h = np.asarray(x, dtype=dtype)
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = h @ np.asarray(w, dtype=dtype).T + np.asarray(b, dtype=dtype)
        if i < last:
            h = np.maximum(z, 0)
        elif output == "sigmoid":
            h = 1 / (1 + np.exp(-z))
        else:
            h = z
    return h


def naive_reward(agents, tasks, active, obstacles, R, success_radius=0.05):
    """Term-by-term loop version of the shared reward.  Returns (terms dict, completed list)."""
    completed = []
    for j, t in enumerate(tasks):
        if active[j] and min(math.dist(t, a) for a in agents) < success_radius:
            completed.append(j)
    success = 100.0 * len(completed)
    distance = 0.0
    for j, t in enumerate(tasks):
        if active[j] and j not in completed:
            distance -= min(math.dist(t, a) for a in agents)
    n_obs = sum(1 for a in agents for o in obstacles if math.dist(a, o) < R)
    n_aa = 0
    for i in range(len(agents)):
        for k in range(i + 1, len(agents)):
            if math.dist(agents[i], agents[k]) < 2 * R:
                n_aa += 1
    return {"success": success, "distance": distance,
            "agent_obstacle": -2.0 * n_obs, "agent_agent": -2.0 * n_aa}, completed


def bfs_length(blocked: np.ndarray, start, goal):
    """Number of moves on the 4-connected grid, or None if unreachable."""
    h, w = blocked.shape
    seen = {tuple(start): 0}
    q = deque([tuple(start)])
    while q:
        cell = q.popleft()
        if cell == tuple(goal):
            return seen[cell]
        r, c = cell
        for nr, nc in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
            if 0 <= nr < h and 0 <= nc < w and not blocked[nr, nc] and (nr, nc) not in seen:
                seen[(nr, nc)] = seen[cell] + 1
                q.append((nr, nc))
    return None


def segments_intersect(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-12 else (1 if v > 0 else -1)

    def on_seg(a, b, c):
        return min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12 and \
            min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    return any(o == 0 and on_seg(a, b, c) for o, a, b, c in
               ((o1, p1, p2, q1), (o2, p1, p2, q2), (o3, q1, q2, p1), (o4, q1, q2, p2)))


def random_generic_mlp(rng, widths, output, margin=1e-4, batch=4, max_tries=1000):
    """Random net and input batch with every ReLU pre-activation at least ``margin`` from its kink.

    Central differences are only a valid oracle where the function is smooth
    within the step size, so kink-straddling draws are re-sampled.
    """
    from tapf.nn import MlpParams, init_mlp, mlp_forward
    for _ in range(max_tries):
        p = init_mlp(widths, output, rng)
        p = MlpParams(p.weights, [rng.uniform(-0.5, 0.5, size=b.shape) for b in p.biases], output)
        x = rng.normal(size=(batch, widths[0]))
        _, cache = mlp_forward(p, x)
        if all(np.abs(z).min() >= margin for z in cache.pre[:-1]):
            return p, x
    raise RuntimeError("could not draw a net in generic position")
