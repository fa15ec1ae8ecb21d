"""Scenario presets, scenario files and world generation."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .env import InfeasibleScenario, Physics, WorldState, build_world, sample_free_points
from .nn import ContractViolation

# Corridor geometry.  The axis sits on a cell-centre row of the default 32x32
# raster so the free channel rasterizes to exactly one cell.
CORRIDOR_Y = 0.03125
CORRIDOR_GAP = 0.14        # free width between wall surfaces, in [2R, 4R)
CORRIDOR_HALF_LEN = 0.4
WALL_SPACING = 0.05


@dataclass
class ScenarioConfig:
    name: str
    n_agents: int
    n_tasks: int
    obstacles: Any = "none"          # "none" | "shelf_grid" | "corridor" | [[x, y, r], ...]
    physics: dict = field(default_factory=dict)
    horizon: int = 100
    seeds: list = field(default_factory=lambda: [0, 1, 2])

    def __post_init__(self):
        if self.n_agents < 1 or self.n_tasks < 1:
            raise ContractViolation("scenario needs at least one agent and one task")

    def make_physics(self) -> Physics:
        unknown = set(self.physics) - set(Physics.__dataclass_fields__)
        if unknown:
            raise ContractViolation(f"unknown physics overrides: {sorted(unknown)}")
        return Physics(**self.physics)

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS: dict[str, ScenarioConfig] = {
    "a2_t2": ScenarioConfig("a2_t2", 2, 2),
    "a2_t4": ScenarioConfig("a2_t4", 2, 4),
    "a5_t5": ScenarioConfig("a5_t5", 5, 5),
    "a5_t10": ScenarioConfig("a5_t10", 5, 10),
    "a5_t20": ScenarioConfig("a5_t20", 5, 20),
    "corridor": ScenarioConfig("corridor", 2, 2, obstacles="corridor"),
}
TABLE_LEVELS = ["a2_t2", "a2_t4", "a5_t5", "a5_t10", "a5_t20"]


def get_preset(name: str) -> ScenarioConfig:
    try:
        return copy.deepcopy(PRESETS[name])
    except KeyError:
        raise ContractViolation(f"unknown scenario {name!r}; known: {', '.join(PRESETS)}") from None


def scenario_from_dict(raw: dict) -> ScenarioConfig:
    """Scenario from either the file layout (agents, tasks, obstacles as {x, y, r}) or to_dict output."""
    raw = dict(raw)
    if "n_agents" in raw:
        return ScenarioConfig(**raw)
    try:
        n_agents, n_tasks = int(raw["agents"]), int(raw["tasks"])
    except KeyError as e:
        raise ContractViolation(f"scenario is missing field {e.args[0]!r}") from None
    seeds = raw.get("seeds", [raw["seed"]] if "seed" in raw else [0, 1, 2])
    obstacles = raw.get("obstacles", "none")
    if isinstance(obstacles, list):
        obstacles = [[o["x"], o["y"], o["r"]] if isinstance(o, dict) else list(o) for o in obstacles]
    return ScenarioConfig(raw.get("name", "custom"), n_agents, n_tasks, obstacles,
                          dict(raw.get("physics", {})), int(raw.get("horizon", 100)), list(seeds))


def load_scenario_file(path: str | Path) -> ScenarioConfig:
    """Read a JSON scenario: {name?, agents, tasks, obstacles, physics, horizon, seed | seeds}."""
    raw = json.loads(Path(path).read_text())
    raw.setdefault("name", Path(path).stem)
    return scenario_from_dict(raw)


def shelf_grid(physics: Physics) -> np.ndarray:
    """Three rows of short shelves, each a run of touching obstacle disks."""
    r = physics.obstacle_radius
    out = []
    for y in (-0.5, 0.0, 0.5):
        for x0 in (-0.6, 0.2):
            for k in range(5):
                out.append((x0 + 2 * r * k, y, r))
    return np.array(out)


def corridor_obstacles(physics: Physics) -> np.ndarray:
    """Two corridor walls plus barriers that close off every other route."""
    r = physics.obstacle_radius
    off = CORRIDOR_GAP / 2 + r
    half = physics.world_half
    out = []
    xs = np.arange(-CORRIDOR_HALF_LEN, CORRIDOR_HALF_LEN + 1e-9, WALL_SPACING)
    for x in xs:
        out.append((x, CORRIDOR_Y + off, r))
        out.append((x, CORRIDOR_Y - off, r))
    up = np.arange(CORRIDOR_Y + off + WALL_SPACING, half + 1e-9, WALL_SPACING)
    down = np.arange(CORRIDOR_Y - off - WALL_SPACING, -half - 1e-9, -WALL_SPACING)
    for x in (-CORRIDOR_HALF_LEN, CORRIDOR_HALF_LEN):
        for y in np.concatenate([up, down]):
            out.append((x, y, r))
    return np.round(np.array(out), 12)


def _obstacles(config: ScenarioConfig, physics: Physics) -> np.ndarray:
    spec = config.obstacles
    if spec in (None, "none"):
        return np.zeros((0, 3))
    if spec == "shelf_grid":
        return shelf_grid(physics)
    if spec == "corridor":
        return corridor_obstacles(physics)
    if isinstance(spec, str):
        raise ContractViolation(f"unknown obstacle layout {spec!r}")
    arr = np.asarray(spec, dtype=np.float64).reshape(-1, 3)
    if (arr[:, 2] <= 0).any():
        raise ContractViolation("obstacle radius must be positive")
    return arr


def make_scenario(config: ScenarioConfig, seed: int) -> WorldState:
    """Random agents and tasks in free space; deterministic in (config, seed)."""
    if config.obstacles == "corridor":
        return corridor_scenario(config.make_physics(), config.horizon)
    physics = config.make_physics()
    obstacles = _obstacles(config, physics)
    rng = np.random.default_rng(seed)
    R = physics.radius
    taken = [(o[:2], o[2] - R) for o in obstacles]   # clearance 2R => R + r from obstacle centre
    agents = sample_free_points(rng, config.n_agents, taken, 2 * R, R, physics.world_half)
    tasks = sample_free_points(rng, config.n_tasks, taken, 2 * R, R, physics.world_half)
    return build_world(agents, tasks, obstacles, physics, config.horizon)


# agent i's designated task sits behind agent j
CORRIDOR_AGENTS = ((-0.25, CORRIDOR_Y), (0.25, CORRIDOR_Y))
CORRIDOR_TASKS = ((0.65, CORRIDOR_Y), (-0.65, CORRIDOR_Y))


def corridor_scenario(physics: Physics | None = None, horizon: int = 100) -> WorldState:
    physics = physics or Physics()
    if not 2 * physics.radius <= CORRIDOR_GAP < 4 * physics.radius:
        raise InfeasibleScenario("corridor gap must fit exactly one agent")
    return build_world(CORRIDOR_AGENTS, CORRIDOR_TASKS, corridor_obstacles(physics), physics, horizon)
