"""Two-stage TAPF baseline: Hungarian task assignment, then A* on an occupancy grid.

Also holds the per-step timing harness that compares one decentralized policy
decision against the baseline's assignment and planning phases.
"""

from __future__ import annotations

import heapq
import itertools
import time
import warnings
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .env import WorldState, distance_matrix, observe_all
from .nn import ContractViolation, MlpParams, mlp_forward


class NoPathError(RuntimeError):
    pass


@dataclass(frozen=True)
class OccupancyGrid:
    width: int
    height: int
    cell_size: float
    blocked: np.ndarray        # (height, width) bool, row = y index, col = x index
    origin: tuple[float, float] = (-1.0, -1.0)

    def cell_center(self, cell: tuple[int, int]) -> np.ndarray:
        r, c = cell
        return np.array([self.origin[0] + (c + 0.5) * self.cell_size,
                         self.origin[1] + (r + 0.5) * self.cell_size])

    def cell_of(self, point) -> tuple[int, int]:
        x, y = point
        c = int(np.floor((x - self.origin[0]) / self.cell_size))
        r = int(np.floor((y - self.origin[1]) / self.cell_size))
        return min(max(r, 0), self.height - 1), min(max(c, 0), self.width - 1)

    def free(self, cell: tuple[int, int]) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width and not self.blocked[r, c]

    def nearest_free(self, cell: tuple[int, int]) -> tuple[int, int]:
        if self.free(cell):
            return cell
        free = np.argwhere(~self.blocked)
        if not len(free):
            raise NoPathError("grid has no free cells")
        d = np.abs(free - np.array(cell)).sum(axis=1)
        r, c = free[np.argmin(d)]  # argmin keeps the first, i.e. smallest (row, col)
        return int(r), int(c)


def rasterize_world(world: WorldState, resolution: int = 32, conservative: bool = False) -> OccupancyGrid:
    """Block cells whose centre lies within (obstacle radius + agent radius) of an obstacle.

    With ``conservative=True`` a cell is blocked when the inflated disk touches any
    part of it instead; that variant is monotone under coarsening.
    """
    if resolution < 8:
        raise ContractViolation("resolution must be at least 8 cells per side")
    half = world.physics.world_half
    size = 2 * half / resolution
    blocked = np.zeros((resolution, resolution), dtype=bool)
    if len(world.obstacle_pos):
        idx = (np.arange(resolution) + 0.5) * size - half
        cx, cy = np.meshgrid(idx, idx)                 # cy varies along rows
        reach = world.obstacle_radius + world.physics.radius
        for (ox, oy), rr in zip(world.obstacle_pos, reach):
            if conservative:
                dx = np.maximum(np.abs(cx - ox) - size / 2, 0.0)
                dy = np.maximum(np.abs(cy - oy) - size / 2, 0.0)
            else:
                dx, dy = cx - ox, cy - oy
            blocked |= dx * dx + dy * dy < rr * rr
    return OccupancyGrid(resolution, resolution, size, blocked, (-half, -half))


_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))


def astar_plan(grid: OccupancyGrid, start: tuple[int, int], goal: tuple[int, int],
               max_expansions: int | None = None) -> list[tuple[int, int]]:
    """4-connected A* with a Manhattan heuristic.

    Ties on f go to the smaller (row, col), then to the earlier push.  When
    ``max_expansions`` runs out, the path to the expanded cell closest to the goal
    is returned instead (one bounded replanning step).
    """
    start, goal = tuple(start), tuple(goal)
    if not grid.free(start) or not grid.free(goal):
        raise ContractViolation("start and goal must be free cells")

    def h(cell):
        return abs(cell[0] - goal[0]) + abs(cell[1] - goal[1])

    counter = itertools.count()
    heap = [(h(start), start, next(counter))]
    g = {start: 0}
    parent: dict = {start: None}
    closed = set()
    best = start
    expansions = 0
    while heap:
        _, cell, _ = heapq.heappop(heap)
        if cell in closed:
            continue
        if cell == goal:
            return _walk_back(parent, cell)
        closed.add(cell)
        if (h(cell), cell) < (h(best), best):
            best = cell
        expansions += 1
        if max_expansions is not None and expansions >= max_expansions:
            return _walk_back(parent, best)
        gc = g[cell] + 1
        for dr, dc in _MOVES:
            nxt = (cell[0] + dr, cell[1] + dc)
            if not grid.free(nxt) or nxt in closed:
                continue
            if gc < g.get(nxt, 1 << 60):
                g[nxt] = gc
                parent[nxt] = cell
                heapq.heappush(heap, (gc + h(nxt), nxt, next(counter)))
    raise NoPathError(f"no path from {start} to {goal}")


def _walk_back(parent: dict, cell) -> list[tuple[int, int]]:
    path = []
    while cell is not None:
        path.append(cell)
        cell = parent[cell]
    return path[::-1]


def grid_distances(grid: OccupancyGrid, source: tuple[int, int]) -> np.ndarray:
    """Step counts from ``source`` to every cell (inf where unreachable)."""
    dist = np.full(grid.blocked.shape, np.inf)
    dist[source] = 0
    queue = deque([source])
    while queue:
        r, c = queue.popleft()
        for dr, dc in _MOVES:
            nr, nc = r + dr, c + dc
            if grid.free((nr, nc)) and dist[nr, nc] == np.inf:
                dist[nr, nc] = dist[r, c] + 1
                queue.append((nr, nc))
    return dist


def _grid_graph(grid: OccupancyGrid) -> csr_matrix:
    h, w = grid.blocked.shape
    free = ~grid.blocked
    ids = np.arange(h * w).reshape(h, w)
    right = free[:, :-1] & free[:, 1:]
    down = free[:-1, :] & free[1:, :]
    src = np.concatenate([ids[:, :-1][right], ids[:-1, :][down]])
    dst = np.concatenate([ids[:, 1:][right], ids[1:, :][down]])
    return csr_matrix((np.ones(len(src)), (src, dst)), shape=(h * w, h * w))


def path_cost_matrix(grid: OccupancyGrid, sources, targets) -> np.ndarray:
    """Grid shortest-path lengths in metres, Euclidean where no grid path exists."""
    w = grid.width
    src = [r * w + c for r, c in (grid.nearest_free(grid.cell_of(p)) for p in sources)]
    dst = [r * w + c for r, c in (grid.nearest_free(grid.cell_of(p)) for p in targets)]
    steps = shortest_path(_grid_graph(grid), directed=False, unweighted=True, indices=src)
    steps = steps.reshape(len(src), -1)[:, dst]
    eucl = distance_matrix(sources, targets)
    return np.where(np.isfinite(steps), steps * grid.cell_size, eucl)


# --------------------------------------------------------------------------- assignment

def _hungarian(cost: np.ndarray) -> tuple[list[int], float]:
    """Shortest augmenting path Hungarian method with potentials; rows <= columns, O(n^2 m)."""
    n, m = cost.shape
    table = cost.tolist()
    INF = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    match = [0] * (m + 1)      # match[j] = row holding column j (1-based, 0 = free)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = [INF] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta, j1 = INF, 0
            row = table[i0 - 1]
            ui = u[i0]
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - ui - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(m + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    perm = [0] * n
    for j in range(1, m + 1):
        if match[j]:
            perm[match[j] - 1] = j - 1
    return perm, float(sum(cost[i, perm[i]] for i in range(n)))


def hungarian_assign(cost) -> tuple[int, ...]:
    """Minimum-cost perfect matching; ``result[i]`` is the task of agent i.

    Among equally cheap matchings the lexicographically smallest is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ContractViolation(f"cost matrix must be square, got {cost.shape}")
    if not np.isfinite(cost).all():
        raise ContractViolation("cost matrix has non-finite entries")
    n = cost.shape[0]
    if n == 0:
        return ()
    _, best = _hungarian(cost)
    tol = 1e-9 * (1.0 + np.abs(cost).sum())
    rows, cols = list(range(n)), list(range(n))
    chosen: list[int] = []
    remaining = best
    for i in range(n):
        rest_rows = rows[i + 1:]
        for j in cols:
            rest_cols = [c for c in cols if c != j]
            rest = _hungarian(cost[np.ix_(rest_rows, rest_cols)])[1] if rest_rows else 0.0
            if cost[i, j] + rest <= remaining + tol:
                chosen.append(j)
                remaining = rest
                cols = rest_cols
                break
    return tuple(chosen)


def assignment_cost(cost, perm) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return float(sum(cost[i, j] for i, j in enumerate(perm)))


def multi_round_assign(cost, task_cost=None) -> list[list[int]]:
    """Chain Hungarian rounds so n agents cover m >= n tasks.

    ``cost`` is agents x tasks.  From the second round on, an agent's cost is
    measured from the task it took last round, read from ``task_cost`` (tasks x
    tasks), which is required whenever more than one round is needed.  Rounds
    with more tasks than agents are solved as rectangular matchings.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if not np.isfinite(cost).all():
        raise ContractViolation("cost matrix has non-finite entries")
    if m > n and task_cost is None:
        raise ContractViolation("task_cost is needed to chain more than one round")
    task_cost = None if task_cost is None else np.asarray(task_cost, dtype=np.float64)
    plan: list[list[int]] = [[] for _ in range(n)]
    remaining = list(range(m))
    current = cost
    while remaining:
        sub = current[:, remaining]
        k = len(remaining)
        if k < n:
            sub = np.hstack([sub, np.zeros((n, n - k))])
        perm = hungarian_assign(sub) if sub.shape[0] == sub.shape[1] else _hungarian(sub)[0]
        for agent in range(n):
            col = perm[agent]
            if col < k:
                plan[agent].append(remaining[col])
        taken = {remaining[perm[a]] for a in range(n) if perm[a] < k}
        remaining = [t for t in remaining if t not in taken]
        if remaining:
            last = [p[-1] if p else None for p in plan]
            current = np.vstack([task_cost[t] if t is not None else cost[a]
                                 for a, t in enumerate(last)])
    return plan


# --------------------------------------------------------------------------- timing

def _time_call(fn: Callable[[], object], trials: int, warmup: int) -> tuple[float, float]:
    for _ in range(warmup):
        fn()
    samples = np.empty(trials)
    clock = time.perf_counter_ns
    for i in range(trials):
        t0 = clock()
        fn()
        samples[i] = (clock() - t0) * 1e-9
    return float(samples.mean()), float(samples.std())


def bench_per_step(world_factory: Callable[[], WorldState], policy: MlpParams, scenario: str = "",
                   resolution: int = 32, trials: int = 1000, warmup: int = 100,
                   max_expansions: int | None = 1024) -> list[dict]:
    """Mean and std wall time of one policy decision vs. the baseline's TA and PF phases.

    TA covers pricing (grid path lengths agent-task and task-task) plus the
    chained Hungarian rounds; PF is one expansion-bounded A* replan for agent 0.
    """
    if trials < 100:
        raise ContractViolation("at least 100 timing trials are required")
    if time.get_clock_info("perf_counter").resolution > 1e-6:
        warnings.warn("clock resolution is coarser than 1 us; timings are unreliable")
    world = world_factory()
    obs = observe_all(world)
    agent = itertools.cycle(range(world.n_agents))

    def decide():
        mlp_forward(policy, obs[next(agent)])

    grid = rasterize_world(world, resolution)

    def assign():
        # the assignment stage has to price tasks before it can match them
        cost = path_cost_matrix(grid, world.agent_pos, world.task_pos)
        task_cost = path_cost_matrix(grid, world.task_pos, world.task_pos)
        return multi_round_assign(cost, task_cost)

    plan = assign()
    start = grid.nearest_free(grid.cell_of(world.agent_pos[0]))
    goal = grid.nearest_free(grid.cell_of(world.task_pos[plan[0][0]]))

    def replan():
        astar_plan(grid, start, goal, max_expansions)

    rows = []
    for method, phase, fn in (("ours", "decision", decide), ("baseline", "TA", assign),
                              ("baseline", "PF", replan)):
        mean, std = _time_call(fn, trials, warmup)
        rows.append({"scenario": scenario, "method": method, "phase": phase,
                     "mean_seconds": mean, "std_seconds": std, "trials": trials})
    return rows
