"""Command line entry point: tapf <train|eval|bench|render|check>.

Settings are resolved in three layers, later ones winning: the named scenario
preset and TrainConfig defaults, then the JSON file given by --config, then
explicit flags.  A config file holds any of

    {"scenario": "a2_t2" | {...scenario fields...},
     "train": {...TrainConfig fields, or "preset": "desk"...},
     "seed": 0, "episodes": 50, "trials": 1000, "resolution": 32}

and every run manifest written by this tool is itself a valid config file.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .baselines import bench_per_step
from .maddpg import (METRIC_COLUMNS, LearnedPolicy, TrainConfig, evaluate, rollout, _as_controller,
                     evaluation_seeds, train)
from .nn import ContractViolation, four_layer, load_params
from .render import render_trajectories
from .scenarios import TABLE_LEVELS, ScenarioConfig, get_preset, make_scenario, scenario_from_dict

COMMANDS = ("train", "eval", "bench", "render", "check")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- CSV helpers

def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])


def read_csv(path: Path) -> list[dict]:
    """Inverse of write_csv for numeric tables: empty cells become None."""
    def parse(s):
        if s == "":
            return None
        try:
            return int(s)
        except ValueError:
            try:
                return float(s)
            except ValueError:
                return s
    with open(path, newline="") as f:
        return [{k: parse(v) for k, v in row.items()} for row in csv.DictReader(f)]


def return_curve(metrics: Sequence[dict]) -> list[dict]:
    """One point per evaluation: mean training return since the previous point plus the eval return."""
    if not metrics:
        raise ValueError("metrics are empty")
    points, pending = [], []
    for row in metrics:
        pending.append(row["episode_return"])
        if row.get("eval_return") is not None:
            points.append({"env_step": row["env_step"], "mean_return": float(np.mean(pending)),
                           "eval_return": row["eval_return"]})
            pending = []
    return points


def emit_return_curve(metrics: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    write_csv(path, ("env_step", "mean_return", "eval_return"), return_curve(metrics))
    return path


# --------------------------------------------------------------------------- settings

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"malformed config {path}: {e}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"malformed config {path}: top level must be an object")
    return raw


def _scenario(args, cfg: dict) -> ScenarioConfig:
    try:
        if args.scenario is not None:
            return get_preset(args.scenario)
        spec = cfg.get("scenario")
        if isinstance(spec, str):
            return get_preset(spec)
        if isinstance(spec, dict):
            return scenario_from_dict(spec)
    except (ContractViolation, TypeError) as e:
        raise UsageError(str(e)) from None
    raise UsageError("no scenario given (use --scenario NAME or a config file)")


def _train_config(args, cfg: dict, seed: int) -> TrainConfig:
    raw = dict(cfg.get("train", {}))
    preset = raw.pop("preset", None)
    try:
        base = TrainConfig.desk() if preset == "desk" else TrainConfig()
        if preset not in (None, "desk", "paper"):
            raise UsageError(f"unknown train preset {preset!r}")
        fields = base.to_dict() | raw
        if args.steps is not None:
            fields["total_steps"] = args.steps
        fields["seed"] = seed
        return TrainConfig(**fields)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad train settings: {e}") from None


def _seeds(args, cfg: dict, scenario: ScenarioConfig) -> list[int]:
    if args.seed is not None:
        return [args.seed]
    if "seed" in cfg:
        return [int(cfg["seed"])]
    return [int(s) for s in scenario.seeds]


def _workers(jobs: int) -> int:
    raw = os.environ.get("TAPF_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise UsageError(f"TAPF_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, jobs))


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, payload: dict) -> None:
    (out / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _checkpoint_dir(path: str | None) -> Path:
    if path is None:
        raise UsageError("--checkpoint is required")
    p = Path(path)
    for cand in (p, p / "checkpoint"):
        if (cand / "actor.bin").is_file():
            return cand
    raise UsageError(f"no checkpoint found at {path}")


def _load_policy(ckpt: Path) -> tuple[LearnedPolicy | None, dict]:
    try:
        actor = load_params(ckpt / "actor.bin")
        critic = load_params(ckpt / "critic.bin") if (ckpt / "critic.bin").is_file() else None
        target = load_params(ckpt / "target_critic.bin") if (ckpt / "target_critic.bin").is_file() else None
    except ContractViolation as e:
        raise UsageError(f"unreadable checkpoint {ckpt}: {e}") from None
    meta_path = ckpt / "manifest.json"
    meta = json.loads(meta_path.read_text()) if meta_path.is_file() else {}
    return LearnedPolicy(actor, critic, target), meta


# --------------------------------------------------------------------------- commands

def _train_one(scenario: dict, config: dict, out: str) -> dict:
    """Worker body; plain-data arguments so it can run in a child process."""
    sc = ScenarioConfig(**scenario)
    tc = TrainConfig(**config)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    manifest = {"command": "train", "version": __version__, "scenario": sc.to_dict(),
                "train": tc.to_dict(), "seed": tc.seed, "started": started,
                "outputs": {"metrics": "metrics.csv", "return_curve": "return_curve.csv",
                            "checkpoint": "checkpoint"}}
    _write_manifest(out, manifest)
    policy, metrics = train(lambda s: make_scenario(sc, s), tc, checkpoint_dir=out / "checkpoint")
    write_csv(out / "metrics.csv", METRIC_COLUMNS, metrics)
    emit_return_curve(metrics, out / "return_curve.csv")
    (out / "checkpoint" / "manifest.json").write_text(json.dumps(
        {"scenario": sc.to_dict(), "train": tc.to_dict(), "env_steps": tc.total_steps,
         "version": __version__}, indent=2, sort_keys=True) + "\n")
    manifest["finished"] = _now()
    _write_manifest(out, manifest)
    final = metrics[-1]
    return {"out": str(out), "seed": tc.seed, "eval_return": final["eval_return"],
            "completion_rate": final["completion_rate"]}


def cmd_train(args, cfg: dict) -> int:
    scenario = _scenario(args, cfg)
    seeds = _seeds(args, cfg, scenario)
    out = _out_dir(args, f"runs/train_{scenario.name}")
    jobs = []
    for s in seeds:
        tc = _train_config(args, cfg, s)
        target = out if len(seeds) == 1 else out / f"seed_{s}"
        jobs.append((scenario.to_dict(), tc.to_dict(), str(target)))
    workers = _workers(len(jobs))
    if workers == 1:
        results = [_train_one(*j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_train_one, *zip(*jobs)))
    for r in results:
        print(f"seed {r['seed']}: eval_return={r['eval_return']:.3f} "
              f"completion_rate={r['completion_rate']:.3f} -> {r['out']}")
    return 0


def _eval_scenario(args, cfg: dict, meta: dict) -> ScenarioConfig:
    if args.scenario is None and "scenario" not in cfg and "scenario" in meta:
        return scenario_from_dict(meta["scenario"])
    return _scenario(args, cfg)


def cmd_eval(args, cfg: dict) -> int:
    ckpt = _checkpoint_dir(args.checkpoint)
    policy, meta = _load_policy(ckpt)
    scenario = _eval_scenario(args, cfg, meta)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    episodes = int(cfg.get("episodes", 50))
    out = _out_dir(args, f"runs/eval_{scenario.name}")
    started = _now()
    factory = lambda s: make_scenario(scenario, s)  # noqa: E731
    controller = _as_controller(policy)
    report = evaluate(policy, factory, episodes, seed)
    with open(out / "episodes.jsonl", "w") as f:
        for ep, s in enumerate(evaluation_seeds(seed, episodes)):
            run = rollout(controller, factory(s))
            for rec in run["log"]:
                f.write(json.dumps({"episode": ep, **rec}, sort_keys=True) + "\n")
    summary = report.summary() | {"returns": report.returns, "completed": report.completed,
                                  "steps": report.steps, "collision_steps": report.collision_steps,
                                  "path_lengths": report.path_lengths}
    (out / "eval.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, {"command": "eval", "version": __version__, "scenario": scenario.to_dict(),
                          "seed": seed, "episodes": episodes, "checkpoint": str(ckpt),
                          "started": started, "finished": _now(),
                          "outputs": {"summary": "eval.json", "episodes": "episodes.jsonl"}})
    print(json.dumps(report.summary(), sort_keys=True))
    return 0


def cmd_bench(args, cfg: dict) -> int:
    names = [args.scenario] if args.scenario else list(cfg.get("scenarios", TABLE_LEVELS))
    trials = int(cfg.get("trials", 1000))
    resolution = int(cfg.get("resolution", 32))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    actor = None
    if args.checkpoint:
        actor = _load_policy(_checkpoint_dir(args.checkpoint))[0].actor
    out = _out_dir(args, "runs/bench")
    started = _now()
    rows = []
    for name in names:
        try:
            sc = get_preset(name)
        except ContractViolation as e:
            raise UsageError(str(e)) from None
        world = make_scenario(sc, seed)
        net = actor if actor is not None and actor.in_dim == world.obs_dim else \
            four_layer(world.obs_dim, 4, "sigmoid", seed)
        rows += bench_per_step(lambda: world, net, name, resolution=resolution, trials=trials)
    cols = ("scenario", "method", "phase", "mean_seconds", "std_seconds", "trials")
    write_csv(out / "timing.csv", cols, rows)
    _write_manifest(out, {"command": "bench", "version": __version__, "scenarios": names,
                          "seed": seed, "trials": trials, "resolution": resolution,
                          "started": started, "finished": _now(), "outputs": {"timing": "timing.csv"}})
    for r in rows:
        print(f"{r['scenario']:>8} {r['method']:>8} {r['phase']:>8} {r['mean_seconds']:.3e} s")
    return 0


def cmd_render(args, cfg: dict) -> int:
    ckpt = _checkpoint_dir(args.checkpoint)
    policy, meta = _load_policy(ckpt)
    scenario = _eval_scenario(args, cfg, meta)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    out = _out_dir(args, f"runs/render_{scenario.name}")
    world = make_scenario(scenario, evaluation_seeds(seed, 1)[0])
    run = rollout(_as_controller(policy), world)
    with open(out / "episode.jsonl", "w") as f:
        for rec in run["log"]:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    (out / "episode.svg").write_text(render_trajectories(run["log"], world, scenario.name))
    _write_manifest(out, {"command": "render", "version": __version__, "scenario": scenario.to_dict(),
                          "seed": seed, "checkpoint": str(ckpt), "finished": _now(),
                          "outputs": {"svg": "episode.svg", "episode": "episode.jsonl"}})
    print(out / "episode.svg")
    return 0


def cmd_check(args, cfg: dict) -> int:
    import pytest
    tests = Path(cfg.get("tests", Path(__file__).resolve().parents[2] / "tests"))
    if not tests.is_dir():
        raise UsageError(f"test suite not found at {tests}")
    return int(pytest.main(["-q", str(tests), "-k", "not acceptance"]))


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
            "render": cmd_render, "check": cmd_check}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tapf", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--scenario")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--config")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.steps is not None and args.steps < 1:
            raise UsageError("--steps must be positive")
        return HANDLERS[args.command](args, _load_config(args.config))
    except UsageError as e:
        print(f"tapf: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
