import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

import ds
import experiments
import supervisor
import vehicle
from experiments import MODES, DISTURBANCES, Scenario, SimConfig
from grid import load_map
from planner import load_path, run_rrt_star, save_path

logger = logging.getLogger("sbamp")

# ------------------------------------------------------------
# Defaults
# ------------------------------------------------------------

DEFAULT_OUT = "results"
DEFAULT_SEED = 0
MANIFEST_NAME = "manifest.json"

# scenario "settings" keys that stand in for command-line flags
FLAG_SETTINGS = ("mode", "seed", "dd", "disturbance", "seeds")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _point(text: str):
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if len(values) not in (2, 3):
        raise argparse.ArgumentTypeError(f"expected x,y or x,y,theta, got {text!r}")
    return values


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--scenario", help="scenario JSON file")
    common.add_argument("--map", help="occupancy map file")
    common.add_argument("--seed", type=int, help=f"base seed (default {DEFAULT_SEED})")
    common.add_argument("--out", default=DEFAULT_OUT, help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a simulation setting; repeatable")
    common.add_argument("--jobs", type=int, help="parallel runs (same as --set n_jobs=N)")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true")
    verbosity.add_argument("--quiet", action="store_true")

    parser = Parser(prog="sbamp", description="RRT* planning with a stable dynamical-system controller")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("plan", parents=[common], help="plan one path on a map")
    p.add_argument("--start", type=_point)
    p.add_argument("--goal", type=_point)

    p = sub.add_parser("fit", parents=[common], help="fit a stable mixture model to a path CSV")
    p.add_argument("--path", required=True, help="path CSV written by 'plan'")
    p.add_argument("--speed", type=float, default=supervisor.NOMINAL_SPEED)

    p = sub.add_parser("simulate", parents=[common], help="run one scenario")
    p.add_argument("--mode", choices=MODES)

    p = sub.add_parser("exp1", parents=[common], help="lateral teleports vs replanning rate")
    p.add_argument("--dd", type=_float_list, help="comma-separated offsets in m")
    p.add_argument("--seeds", type=int, help="runs per (mode, offset)")

    p = sub.add_parser("exp2", parents=[common], help="disturbance failure thresholds")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--disturbance", choices=DISTURBANCES)
    p.add_argument("--seeds", type=int, help="seeds per magnitude")

    p = sub.add_parser("exp3", parents=[common], help="randomized shoves on the loop track")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--seeds", type=int, help="number of randomized runs")

    p = sub.add_parser("validate", parents=[common], help="check a scenario file and print it normalized")
    p.add_argument("scenario_file", nargs="?")
    return parser


# ------------------------------------------------------------
# Config resolution
# ------------------------------------------------------------

def parse_sets(items: Sequence[str]) -> Dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        if key not in SimConfig.keys():
            raise UsageError(f"unknown setting '{key}'; known: {', '.join(SimConfig.keys())}")
        out[key] = value
    return out


def resolve_config(args, scenario: Optional[Scenario]) -> SimConfig:
    """Scenario settings first, then --set / --jobs; flags win."""
    sets = parse_sets(args.set)
    if args.jobs is not None:
        sets["n_jobs"] = str(args.jobs)
    config = SimConfig()
    if scenario is not None:
        file_settings = {k: v for k, v in scenario.settings.items() if k not in FLAG_SETTINGS}
        unknown = sorted(set(file_settings) - set(SimConfig.keys()))
        if unknown:
            raise experiments.ScenarioError(f"settings.{unknown[0]}", "unknown setting")
        try:
            config = config.with_overrides(file_settings)
        except ValueError as e:
            raise experiments.ScenarioError("settings", str(e)) from None
    try:
        return config.with_overrides(sets)
    except ValueError as e:
        raise UsageError(str(e)) from None


def flag(args, scenario: Optional[Scenario], name: str, default: Any) -> Any:
    value = getattr(args, name, None)
    if value is not None:
        return value
    if scenario is not None and name in scenario.settings:
        return scenario.settings[name]
    return default


def _load_scenario(args) -> Optional[Scenario]:
    path = getattr(args, "scenario_file", None) or args.scenario
    return experiments.load_scenario(path) if path else None


# ------------------------------------------------------------
# Manifest
# ------------------------------------------------------------

def sha256_file(filename) -> str:
    h = hashlib.sha256()
    with open(filename, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(config: Dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def defaults_block(sim: SimConfig, scenario: Optional[Scenario]) -> Dict[str, Any]:
    return {
        "dt_c": scenario.dt_c if scenario else experiments.DT_CONTROL,
        "dt_g": scenario.dt_g if scenario else experiments.DT_PLANNER,
        "eps_stab": sim.eps_stab,
        "n_components": sim.n_components,
        "waypoint_radius": sim.waypoint_radius,
        "corridor_tolerance": sim.corridor_tolerance,
        "blend_window": sim.blend_window,
        "n0": sim.n0,
    }


def write_manifest(out_dir: str, command: str, config: Dict[str, Any], defaults: Dict[str, Any],
                   artifacts: Sequence[str]) -> str:
    entries = [{"file": os.path.basename(a), "sha256": sha256_file(a)} for a in sorted(artifacts)]
    manifest = {
        "command": command,
        "config": config,
        "config_sha256": config_digest(config),
        "defaults": defaults,
        "artifacts": entries,
    }
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


# ------------------------------------------------------------
# Subcommands
# ------------------------------------------------------------

def cmd_plan(args, scenario, sim, out_dir) -> List[str]:
    map_path = args.map or (os.path.join(os.path.dirname(os.path.abspath(args.scenario)), scenario.map_path)
                            if scenario is not None else None)
    if map_path is None:
        raise UsageError("plan needs --map or --scenario")
    start = args.start or (list(scenario.start) if scenario else None)
    goal = args.goal or (list(scenario.goal) if scenario else None)
    if start is None or goal is None:
        raise UsageError("plan needs --start and --goal (or a scenario)")

    grid = experiments.planning_grid(load_map(map_path), sim)
    seed = flag(args, scenario, "seed", DEFAULT_SEED)
    result = run_rrt_star(grid, np.array(start[:2]), np.array(goal[:2]), sim.planner_config(),
                          experiments.derive_rng(seed, "plan"))
    path_file = os.path.join(out_dir, "path.csv")
    save_path(result.path, path_file)
    logger.info("planned %d waypoints, cost %.3f m, %d iterations", len(result.path), result.path.cost,
                result.iterations)
    return [path_file]


def cmd_fit(args, scenario, sim, out_dir) -> List[str]:
    path = load_path(args.path)
    demo = ds.synthesize_demo(path, args.speed, args.speed / ds.DEMO_RATE_HZ)
    model = ds.fit(demo, sim.n_components, sim.eps_stab)
    model_file = os.path.join(out_dir, "model.json")
    ds.save_model(model, model_file)
    logger.info("fitted K=%d on %d samples, residual %.3e, margin %.3f", model.K, len(demo),
                ds.mean_squared_residual(model, demo), model.stability_margin())
    return [model_file]


def cmd_simulate(args, scenario, sim, out_dir) -> List[str]:
    if scenario is None:
        raise UsageError("simulate needs --scenario")
    mode = flag(args, scenario, "mode", "sbamp")
    seed = flag(args, scenario, "seed", scenario.seeds[0])
    result = experiments.run_scenario(scenario, mode, seed, sim)

    traj = os.path.join(out_dir, "trajectory.csv")
    events = os.path.join(out_dir, "events.csv")
    metrics = os.path.join(out_dir, "metrics.csv")
    vehicle.write_trajectory(result.trajectory, traj)
    supervisor.write_events(result.events, events)
    experiments.write_rows([experiments.metrics_row(result)], experiments.METRICS_COLUMNS, metrics)
    m = result.metrics
    logger.info("%s: f_plan=%.2f Hz, recovery=%s, collisions=%d, goal error %.3f m",
                mode, m.f_plan, m.recovery, m.collisions, m.final_goal_error)
    return [traj, events, metrics]


def cmd_exp1(args, scenario, sim, out_dir) -> List[str]:
    dd = flag(args, scenario, "dd", experiments.EXP1_DELTA_D)
    runs = flag(args, scenario, "seeds", experiments.RUNS_PER_POINT)
    seed = flag(args, scenario, "seed", DEFAULT_SEED)
    rows = experiments.experiment1(dd, runs, seed, sim, progress=not args.quiet)
    table = os.path.join(out_dir, "experiment1.csv")
    plot = os.path.join(out_dir, "experiment1_fplan.csv")
    experiments.write_rows(rows, experiments.EXP1_COLUMNS, table)
    experiments.write_rows(experiments.summarize_experiment1(rows), experiments.EXP1_PLOT_COLUMNS, plot)
    return [table, plot]


def cmd_exp2(args, scenario, sim, out_dir) -> List[str]:
    mode = flag(args, scenario, "mode", None)
    disturbance = flag(args, scenario, "disturbance", None)
    n = flag(args, scenario, "seeds", len(experiments.EXP2_SEEDS))
    base = flag(args, scenario, "seed", DEFAULT_SEED)
    seeds = [experiments.run_seed(base, k) for k in range(n)]

    rows, thresholds = [], []
    for m in ([mode] if mode else MODES):
        for d in ([disturbance] if disturbance else DISTURBANCES):
            res = experiments.experiment2(m, d, seeds, sim)
            rows.extend(res.rows)
            thresholds.append({"mode": m, "disturbance": d, "threshold": res.threshold})
    table = os.path.join(out_dir, "experiment2.csv")
    summary = os.path.join(out_dir, "experiment2_thresholds.csv")
    experiments.write_rows(rows, experiments.EXP2_COLUMNS, table)
    experiments.write_rows(thresholds, ["mode", "disturbance", "threshold"], summary)
    return [table, summary]


def cmd_exp3(args, scenario, sim, out_dir) -> List[str]:
    mode = flag(args, scenario, "mode", "sbamp")
    n = flag(args, scenario, "seeds", experiments.EXP3_SEEDS)
    seed = flag(args, scenario, "seed", DEFAULT_SEED)
    res = experiments.experiment3(n, mode, seed, sim, progress=not args.quiet)
    table = os.path.join(out_dir, "experiment3.csv")
    summary = os.path.join(out_dir, "experiment3_summary.csv")
    experiments.write_rows(res.rows, experiments.EXP3_COLUMNS, table)
    experiments.write_rows([{"mode": mode, "runs": len(res.rows), "recovery_rate": res.recovery_rate,
                             "collisions": res.collisions}],
                           ["mode", "runs", "recovery_rate", "collisions"], summary)
    return [table, summary]


def cmd_validate(args, scenario, sim, out_dir) -> List[str]:
    if scenario is None:
        raise UsageError("validate needs a scenario file")
    normalized = {"scenario": experiments.scenario_to_dict(scenario), "settings": asdict(sim)}
    print(json.dumps(normalized, indent=2, sort_keys=True))
    return []


COMMANDS = {
    "plan": cmd_plan,
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "exp1": cmd_exp1,
    "exp2": cmd_exp2,
    "exp3": cmd_exp3,
    "validate": cmd_validate,
}


def _normalized_args(args) -> Dict[str, Any]:
    skip = {"out", "set", "verbose", "quiet", "jobs"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip and v is not None}


# ------------------------------------------------------------
# Main
# ------------------------------------------------------------

def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(format="[%(levelname)s] %(message)s", level=logging.INFO)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return 1
    except SystemExit as e:
        return int(e.code or 0)

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.getLogger().setLevel(level)

    try:
        scenario = _load_scenario(args)
        sim = resolve_config(args, scenario)
        out_dir = args.out
        if args.command != "validate":
            os.makedirs(out_dir, exist_ok=True)
        artifacts = COMMANDS[args.command](args, scenario, sim, out_dir)
    except UsageError as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError, np.linalg.LinAlgError) as e:
        print(f"[ERROR] {type(e).__name__}: {e}", file=sys.stderr)
        return 2

    if artifacts:
        config = {"args": _normalized_args(args), "settings": asdict(sim)}
        if scenario is not None:
            config["scenario"] = experiments.scenario_to_dict(scenario)
        manifest = write_manifest(out_dir, args.command, config, defaults_block(sim, scenario), artifacts)
        for a in artifacts:
            logger.info("wrote %s", a)
        logger.info("wrote %s", manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
