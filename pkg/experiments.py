import csv
import json
import logging
import math
import os
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union, get_type_hints

import numpy as np
from joblib import Parallel, delayed
from tqdm import tqdm

from grid import CellState, OccupancyGrid, OutOfBounds, add_box, inflate, integrate_scan, is_free, load_map
from planner import (InvalidEndpoint, PlanTimeout, PlannerConfig, cumulative_arclength, point_at_arclength,
                     project_arclength, run_rrt_star, shortcut_path)
from supervisor import Supervisor, SupervisorConfig, SupervisorEvent
from vehicle import (CornerTrap, DriveCommand, PerturbationIntoObstacle, Rotate, SteeringGains, Translate,
                     VehicleState, apply_perturbation, ds_to_command, in_collision, pure_pursuit_command,
                     simulate_scan, step, wrap_angle)

logger = logging.getLogger(__name__)

# ------------------------------------------------------------
# Defaults
# ------------------------------------------------------------

MODES = ("bare_rrt", "sbamp")
DISTURBANCES = ("translate", "rotate", "corner_trap")

DT_CONTROL = 1.0 / 60.0
DT_PLANNER = 1.0
MAP_RESOLUTION = 0.1      # m, experiment maps

EXP1_DT_PLANNER = 0.1
EXP1_DURATION = 8.0       # s
EXP1_DELTA_D = [0.0, 1.0, 2.0, 2.5, 3.0]
RUNS_PER_POINT = 20

EXP2_SEEDS = (0, 1, 2)
EXP2_BISECT_STEPS = 5
EXP2_MAX_MAGNITUDE = {"translate": 0.8, "rotate": math.pi, "corner_trap": 1.0}

EXP3_SEEDS = 20

EXP1_COLUMNS = ["mode", "delta_d", "run", "f_plan_hz", "mean_v_mps", "command_rate_hz"]
EXP1_PLOT_COLUMNS = ["mode", "delta_d", "f_plan_mean", "f_plan_std", "mean_v_mean", "mean_v_std",
                     "command_rate_mean"]
EXP2_COLUMNS = ["mode", "disturbance", "magnitude", "recovered", "t_recover_s", "collisions"]
EXP3_COLUMNS = ["seed", "recovered", "collisions", "t_recover_s"]


class ScenarioError(ValueError):
    def __init__(self, key: str, message: str, line: Optional[int] = None):
        where = f"line {line}, key '{key}'" if line is not None else f"key '{key}'"
        super().__init__(f"{where}: {message}")
        self.key = key
        self.line = line


# ------------------------------------------------------------
# Configuration
# ------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    """Flat settings for one simulated run; every field can be overridden with --set key=value."""
    # global planner
    steer_step: float = 0.5
    rewire_gamma: float = 10.0
    max_iterations: int = 10000
    goal_radius: float = 0.3
    goal_bias: float = 0.05
    min_iterations: Optional[int] = None     # None -> calibrated
    c_iter: Optional[float] = None           # s per iteration; None -> calibrated
    calibration_margin: float = 2.0
    calibration_seeds: int = 2
    # local controller
    n_components: int = 4
    eps_stab: float = 0.1
    waypoint_radius: float = 0.3
    blend_window: float = 0.1
    n0: int = 1
    tau_d: Optional[float] = None
    speed_gain: float = 3.0
    count_waypoint_advance: bool = True
    k_delta: float = 2.0
    min_speed_factor: float = 0.25
    # baseline follower
    lookahead: float = 0.6
    fov_half_angle_deg: float = 60.0
    path_valid_tolerance: float = 0.5
    shortcut_paths: bool = True              # line-of-sight pruning of delivered paths
    shortcut_clearance: float = 0.1          # m beyond inflation_radius for pruned segments
    # scenario handling
    inflation_radius: float = 0.2
    local_goal_distance: float = 3.0
    corridor_tolerance: float = 0.5
    goal_tolerance: float = 0.3
    duration: Optional[float] = None         # s; None -> the scenario's own
    n_jobs: int = 1

    @classmethod
    def keys(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def with_overrides(self, overrides: Mapping[str, Any]) -> "SimConfig":
        hints = get_type_hints(SimConfig)
        values = {}
        for key, raw in overrides.items():
            if key not in hints:
                raise KeyError(f"unknown setting '{key}'")
            values[key] = _coerce(key, raw, hints[key])
        return replace(self, **values)

    def planner_config(self) -> PlannerConfig:
        return PlannerConfig(self.steer_step, self.rewire_gamma, self.max_iterations, self.goal_radius,
                             self.goal_bias, self.min_iterations)

    def supervisor_config(self, scenario: "Scenario") -> SupervisorConfig:
        return SupervisorConfig(
            dt_c=scenario.dt_c, dt_g=scenario.dt_g, tau_d=self.tau_d, n0=self.n0,
            blend_window=self.blend_window, waypoint_radius=self.waypoint_radius,
            count_waypoint_advance=self.count_waypoint_advance, speed_gain=self.speed_gain,
            n_components=self.n_components, eps_stab=self.eps_stab, nominal_speed=scenario.nominal_speed,
        )

    def steering_gains(self) -> SteeringGains:
        return SteeringGains(self.k_delta, self.min_speed_factor)


def _coerce(key: str, raw: Any, hint) -> Any:
    optional = getattr(hint, "__origin__", None) is Union
    base = [a for a in hint.__args__ if a is not type(None)][0] if optional else hint
    if isinstance(raw, str):
        text = raw.strip()
        if optional and text.lower() in ("none", "null", ""):
            return None
        try:
            if base is bool:
                if text.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(text)
                return text.lower() in ("true", "1")
            return base(text)
        except ValueError:
            raise ValueError(f"setting '{key}' expects {base.__name__}, got {raw!r}") from None
    if raw is None:
        if not optional:
            raise ValueError(f"setting '{key}' may not be null")
        return None
    if base is int and isinstance(raw, float) and not raw.is_integer():
        raise ValueError(f"setting '{key}' expects int, got {raw!r}")
    return base(raw)


def derive_seed_sequence(seed: int, *keys) -> np.random.SeedSequence:
    """Counter-style split: the same (seed, keys) always gives the same stream."""
    seed = int(seed)
    words = [seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF]
    words.extend(zlib.crc32(str(k).encode()) for k in keys)
    return np.random.SeedSequence(words)


def derive_rng(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed_sequence(seed, *keys))


def planner_rng(seed: int, cycle: int) -> np.random.Generator:
    """Fresh sampler per planning cycle, shared by every mode run on the same seed."""
    return derive_rng(seed, "planner", int(cycle))


def run_seed(seed: int, k: int) -> int:
    return int(derive_seed_sequence(seed, "run", k).generate_state(1)[0])


# ------------------------------------------------------------
# Scenario
# ------------------------------------------------------------

@dataclass(frozen=True)
class LateralTeleport:
    """
    Place the vehicle offset metres to the left of a horizontal centreline.

    Without a station the vehicle keeps its x and heading; with station_x it is reset
    to that point of the centreline, facing +x, before the offset is applied.
    """
    offset: float
    centerline_y: float
    station_x: Optional[float] = None


@dataclass(frozen=True)
class TrapApproach:
    """Move a fraction severity of the way from the current pose to a corner-trap pose."""
    severity: float
    x: float
    y: float
    theta: float


@dataclass(frozen=True)
class ScheduledPerturbation:
    perturbation: Any
    time: Optional[float] = None              # fire at the first tick with t >= time
    min_x: Optional[float] = None             # ... and with the vehicle at x >= min_x
    every_cycle_until: Optional[float] = None # refire before each planning cycle up to this time
    clip_to_free: bool = False                # shorten a translation until it lands in free space


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    truth: OccupancyGrid
    start: Tuple[float, float, float]
    goal: Tuple[float, float]
    route: np.ndarray
    prior: Optional[OccupancyGrid] = None     # known map when the truth holds hidden obstacles
    dt_c: float = DT_CONTROL
    dt_g: float = DT_PLANNER
    nominal_speed: float = 1.0
    schedule: Tuple[ScheduledPerturbation, ...] = ()
    seeds: Tuple[int, ...] = (0,)
    runs: int = 1
    duration: float = 60.0
    stop_at_goal: bool = True
    settings: Dict[str, Any] = field(default_factory=dict)
    map_path: Optional[str] = None
    prior_map_path: Optional[str] = None

    def __post_init__(self):
        if not 0 < self.dt_c < self.dt_g:
            raise ScenarioError("dt_c", f"need 0 < dt_c < dt_g, got {self.dt_c}, {self.dt_g}")
        ratio = self.dt_g / self.dt_c
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ScenarioError("dt_g", f"dt_c={self.dt_c} does not divide dt_g={self.dt_g}")
        if self.runs < 1:
            raise ScenarioError("runs", f"must be >= 1, got {self.runs}")
        if not self.seeds:
            raise ScenarioError("seeds", "at least one seed is required")
        if self.nominal_speed <= 0:
            raise ScenarioError("speed", f"must be > 0, got {self.nominal_speed}")
        if self.duration <= 0:
            raise ScenarioError("duration", f"must be > 0, got {self.duration}")
        if len(self.route) < 2:
            raise ScenarioError("route", "needs at least two points")
        if not self.truth.in_bounds(self.start[:2]) or self.truth.state_at(self.start[:2]) == CellState.OCCUPIED:
            raise ScenarioError("start", f"{self.start} is outside the map or occupied")
        if self.prior is not None and self.prior.cells.shape != self.truth.cells.shape:
            raise ScenarioError("prior_map_path", "prior map must match the true map's shape")

    @property
    def ticks_per_cycle(self) -> int:
        return int(round(self.dt_g / self.dt_c))

    @property
    def sensing(self) -> bool:
        return self.prior is not None

    @property
    def known_map(self) -> OccupancyGrid:
        return self.prior if self.prior is not None else self.truth


def straight_route(start, goal) -> np.ndarray:
    return np.array([start[:2], goal[:2]], dtype=float)


def walled_grid(width_m: float, height_m: float, resolution: float = MAP_RESOLUTION) -> OccupancyGrid:
    """Free rectangle with a one-cell occupied border."""
    w = int(round(width_m / resolution))
    h = int(round(height_m / resolution))
    cells = np.full((h, w), int(CellState.FREE), dtype=np.int8)
    cells[0, :] = cells[-1, :] = CellState.OCCUPIED
    cells[:, 0] = cells[:, -1] = CellState.OCCUPIED
    return OccupancyGrid(resolution, (0.0, 0.0), w, h, cells)


# ------------------------------------------------------------
# Built-in scenarios
# ------------------------------------------------------------

STRAIGHT_RESOLUTION = 0.05
STRAIGHT_CENTERLINE_Y = 1.525     # mid-cell, so every teleport lands inside one cell
STRAIGHT_STATION_X = 6.025


def straightaway_scenario(delta_d: float = 0.0, dt_g: float = EXP1_DT_PLANNER,
                          duration: float = EXP1_DURATION, runs: int = RUNS_PER_POINT) -> Scenario:
    """
    20 m x 5.5 m straightaway with a layered maze above the lane.

    Every planning cycle the vehicle is put back at the station, delta_d to the left of
    the centreline. Offsets of 1, 2, 2.5 and 3 m land in successively deeper layers:
    the lower band, the middle band, the one-row strip under the ledge and the room
    above it. Each layer drains into the one below through a single slit, and the
    slits alternate ends, so a deeper start needs a longer path through more narrow
    passages before it reaches the lane.
    """
    res = STRAIGHT_RESOLUTION
    truth = walled_grid(20.0, 5.5, res)
    # lane ceiling and the solid blocks beside the maze
    truth = add_box(truth, (0.0, 1.97), (20.0, 2.08))
    truth = add_box(truth, (0.0, 1.97), (3.0, 5.5))
    truth = add_box(truth, (11.0, 1.97), (20.0, 5.5))
    # band separators; the strip under the ledge is a single free row
    truth = add_box(truth, (3.0, 2.97), (11.0, 3.08))
    truth = add_box(truth, (3.0, 3.77), (11.0, 3.78))
    truth = add_box(truth, (5.4, 4.27), (9.5, 4.28))
    # slits: lane <- lower band at the right end, lower <- middle at the left end,
    # middle <- strip 1.5 m right of the station
    truth = add_box(truth, (10.0, 1.97), (10.6, 2.08), CellState.FREE)
    truth = add_box(truth, (3.4, 2.97), (4.0, 3.08), CellState.FREE)
    truth = add_box(truth, (7.2, 3.77), (7.8, 3.78), CellState.FREE)

    start = (STRAIGHT_STATION_X, STRAIGHT_CENTERLINE_Y, 0.0)
    goal = (19.0, STRAIGHT_CENTERLINE_Y)
    teleport = LateralTeleport(float(delta_d), STRAIGHT_CENTERLINE_Y, STRAIGHT_STATION_X)
    schedule = (ScheduledPerturbation(teleport, time=0.0, every_cycle_until=duration),)
    return Scenario("straightaway", truth, start, goal, straight_route(start, goal), dt_g=dt_g,
                    schedule=schedule, runs=runs, duration=duration, stop_at_goal=False)


CORRIDOR_TRIGGER_X = 1.5
CORRIDOR_TRAP_POSE = (0.9, 0.25, math.radians(170.0))


def corridor_scenario(disturbance: Optional[str] = None, magnitude: float = 0.0,
                      seeds: Sequence[int] = EXP2_SEEDS) -> Scenario:
    """5 m x 2 m corridor with two wall-mounted obstacles; one disturbance fires at x >= 1.5 m."""
    truth = walled_grid(5.0, 2.0)
    truth = add_box(truth, (2.2, 0.0), (2.6, 0.6))
    truth = add_box(truth, (3.4, 1.4), (3.8, 2.0))
    start = (0.5, 1.0, 0.0)
    goal = (4.5, 1.0)
    schedule = ()
    if disturbance is not None:
        if disturbance == "translate":
            p = Translate(magnitude, math.pi / 2)
        elif disturbance == "rotate":
            p = Rotate(magnitude)
        elif disturbance == "corner_trap":
            p = TrapApproach(magnitude, *CORRIDOR_TRAP_POSE)
        else:
            raise ValueError(f"unknown disturbance '{disturbance}', expected one of {DISTURBANCES}")
        schedule = (ScheduledPerturbation(p, min_x=CORRIDOR_TRIGGER_X),)
    return Scenario("corridor", truth, start, goal, straight_route(start, goal), schedule=schedule,
                    seeds=tuple(seeds), runs=len(seeds), duration=30.0)


LOOP_ROUTE = np.array([[3.0, 1.5], [10.5, 1.5], [10.5, 6.5], [1.5, 6.5], [1.5, 1.5], [3.0, 1.5]])


def loop_scenario(seed: int = 0, magnitude_scale: float = 1.0, obstacle: bool = True) -> Scenario:
    """
    12 m x 8 m loop track with a 2 m lane, one lap counter-clockwise. A random shove
    (<= 1 m), a random spin (<= 90 deg) and a hidden 0.3 m box are drawn from seed.
    """
    rng = derive_rng(seed, "loop")
    prior = walled_grid(12.0, 8.0)
    prior = add_box(prior, (0.0, 0.0), (0.5, 8.0))
    prior = add_box(prior, (11.5, 0.0), (12.0, 8.0))
    prior = add_box(prior, (0.0, 0.0), (12.0, 0.5))
    prior = add_box(prior, (0.0, 7.5), (12.0, 8.0))
    prior = add_box(prior, (2.5, 2.5), (9.5, 5.5))

    shove = float(rng.uniform(0.0, 1.0)) * magnitude_scale
    side = math.pi / 2 if rng.random() < 0.5 else -math.pi / 2
    spin = float(rng.uniform(-math.pi / 2, math.pi / 2)) * magnitude_scale
    t_shove = float(rng.uniform(4.0, 10.0))
    t_spin = float(rng.uniform(14.0, 22.0))

    truth = prior
    if obstacle:
        total = cumulative_arclength(LOOP_ROUTE)[-1]
        s = float(rng.uniform(8.0, total - 6.0))
        c = point_at_arclength(LOOP_ROUTE, s) + rng.uniform(-0.5, 0.5, size=2)
        truth = add_box(prior, c - 0.15, c + 0.15)

    start = (3.0, 1.5, 0.0)
    schedule = (
        ScheduledPerturbation(Translate(shove, side), time=t_shove, clip_to_free=True),
        ScheduledPerturbation(Rotate(spin), time=t_spin),
    )
    return Scenario("loop", truth, start, (3.0, 1.5), LOOP_ROUTE.copy(), prior=prior if obstacle else None,
                    schedule=schedule, seeds=(seed,), duration=90.0)


# ------------------------------------------------------------
# Scenario files
# ------------------------------------------------------------

def _number(value, key: str, kind=float):
    if isinstance(value, bool):
        raise ScenarioError(key, f"expected a number, got {value!r}")
    if kind is int and isinstance(value, float) and not value.is_integer():
        raise ScenarioError(key, f"expected an integer, got {value!r}")
    try:
        out = kind(value)
    except (TypeError, ValueError):
        raise ScenarioError(key, f"expected a number, got {value!r}") from None
    if kind is float and not math.isfinite(out):
        raise ScenarioError(key, f"expected a finite number, got {value!r}")
    return out


_PERTURBATION_FIELDS = {
    "translate": (Translate, ("distance", "direction")),
    "rotate": (Rotate, ("angle",)),
    "corner_trap": (CornerTrap, ("x", "y", "theta")),
    "lateral_teleport": (LateralTeleport, ("offset", "centerline_y", "station_x")),
    "trap_approach": (TrapApproach, ("severity", "x", "y", "theta")),
}
_PERTURBATION_DEFAULTS = {("translate", "direction"): math.pi / 2, ("lateral_teleport", "station_x"): None}
_PERTURBATION_TYPES = {cls: kind for kind, (cls, _) in _PERTURBATION_FIELDS.items()}


def _perturbation_from_dict(d: Mapping[str, Any], key: str):
    if not isinstance(d, dict):
        raise ScenarioError(key, "expected an object")
    kind = d.get("type")
    if kind not in _PERTURBATION_FIELDS:
        raise ScenarioError(f"{key}.type", f"unknown perturbation type {kind!r}")
    cls, names = _PERTURBATION_FIELDS[kind]
    values = []
    for name in names:
        if name in d:
            values.append(_number(d[name], f"{key}.{name}"))
        elif (kind, name) in _PERTURBATION_DEFAULTS:
            values.append(_PERTURBATION_DEFAULTS[(kind, name)])
        else:
            raise ScenarioError(f"{key}.{name}", "missing")

    def optional(name):
        return None if d.get(name) is None else _number(d[name], f"{key}.{name}")

    return ScheduledPerturbation(
        cls(*values),
        time=optional("time"),
        min_x=optional("min_x"),
        every_cycle_until=optional("every_cycle_until"),
        clip_to_free=bool(d.get("clip_to_free", False)),
    )


def _perturbation_to_dict(sp: ScheduledPerturbation) -> Dict[str, Any]:
    p = sp.perturbation
    if type(p) not in _PERTURBATION_TYPES:
        raise TypeError(f"unknown perturbation {p!r}")
    out = {"type": _PERTURBATION_TYPES[type(p)], **{k: v for k, v in asdict(p).items() if v is not None}}
    for name in ("time", "min_x", "every_cycle_until"):
        if getattr(sp, name) is not None:
            out[name] = getattr(sp, name)
    if sp.clip_to_free:
        out["clip_to_free"] = True
    return out


def scenario_from_dict(data: Mapping[str, Any], base_dir: str = ".", name: str = "scenario") -> Scenario:
    def need(key):
        if key not in data:
            raise ScenarioError(key, "missing")
        return data[key]

    def point(key, n):
        v = need(key)
        if not isinstance(v, (list, tuple)) or len(v) not in n:
            raise ScenarioError(key, f"expected a list of {' or '.join(map(str, n))} numbers, got {v!r}")
        return tuple(_number(x, key) for x in v)

    map_path = need("map_path")
    truth = load_map(os.path.join(base_dir, map_path))
    prior_path = data.get("prior_map_path")
    prior = load_map(os.path.join(base_dir, prior_path)) if prior_path else None

    start = point("start", (2, 3))
    if len(start) == 2:
        start = start + (0.0,)
    goal = point("goal", (2,))
    if "route" in data:
        try:
            route = np.array(data["route"], dtype=float)
        except (TypeError, ValueError):
            raise ScenarioError("route", "expected a list of [x, y] points") from None
    else:
        route = straight_route(start, goal)
    if route.ndim != 2 or route.shape[1] != 2:
        raise ScenarioError("route", f"expected a list of [x, y] points, got shape {route.shape}")

    perturbations = data.get("perturbations", [])
    if not isinstance(perturbations, list):
        raise ScenarioError("perturbations", "expected a list")
    schedule = tuple(_perturbation_from_dict(d, f"perturbations[{i}]") for i, d in enumerate(perturbations))
    raw_seeds = data.get("seeds", [0])
    if not isinstance(raw_seeds, list):
        raise ScenarioError("seeds", f"expected a list of integers, got {raw_seeds!r}")
    seeds = tuple(_number(s, "seeds", int) for s in raw_seeds)
    settings = data.get("settings", {})
    if not isinstance(settings, dict):
        raise ScenarioError("settings", "expected an object")

    return Scenario(
        name=str(data.get("name", name)), truth=truth, start=start, goal=goal, route=route, prior=prior,
        dt_c=_number(data.get("dt_c", DT_CONTROL), "dt_c"), dt_g=_number(data.get("dt_g", DT_PLANNER), "dt_g"),
        nominal_speed=_number(data.get("speed", 1.0), "speed"), schedule=schedule, seeds=seeds,
        runs=_number(data.get("runs", len(seeds)), "runs", int),
        duration=_number(data.get("duration", 60.0), "duration"),
        stop_at_goal=bool(data.get("stop_at_goal", True)), settings=dict(settings),
        map_path=map_path, prior_map_path=prior_path,
    )


def load_scenario(filename) -> Scenario:
    with open(filename, "r") as f:
        text = f.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError("<json>", e.msg, line=e.lineno) from None
    if not isinstance(data, dict):
        raise ScenarioError("<root>", "scenario file must hold a JSON object", line=1)
    name = os.path.splitext(os.path.basename(str(filename)))[0]
    return scenario_from_dict(data, os.path.dirname(os.path.abspath(filename)), name)


def scenario_to_dict(s: Scenario) -> Dict[str, Any]:
    return {
        "name": s.name,
        "map_path": s.map_path,
        "prior_map_path": s.prior_map_path,
        "start": list(s.start),
        "goal": list(s.goal),
        "route": s.route.tolist(),
        "dt_c": s.dt_c,
        "dt_g": s.dt_g,
        "speed": s.nominal_speed,
        "perturbations": [_perturbation_to_dict(sp) for sp in s.schedule],
        "seeds": list(s.seeds),
        "runs": s.runs,
        "duration": s.duration,
        "stop_at_goal": s.stop_at_goal,
        "settings": dict(sorted(s.settings.items())),
    }


# ------------------------------------------------------------
# Route progress
# ------------------------------------------------------------

class RouteTracker:
    """
    Monotone progress along the nominal route.

    Projection is restricted to a window around the current progress so a closed
    loop is not mistaken for finished when the vehicle passes the start again.
    """

    def __init__(self, route, window: float = 2.0, spacing: float = 0.05):
        pts = np.asarray(route, dtype=float)
        keep = np.concatenate([[True], np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-12])
        self.route = pts[keep]
        cum = cumulative_arclength(self.route)
        self.total = float(cum[-1])
        self._s = np.append(np.arange(0.0, self.total, spacing), self.total)
        self._pts = np.column_stack([np.interp(self._s, cum, self.route[:, 0]),
                                     np.interp(self._s, cum, self.route[:, 1])])
        self.window = window
        self.progress = 0.0

    def update(self, p) -> float:
        mask = (self._s >= self.progress - 0.5) & (self._s <= self.progress + self.window)
        idx = np.flatnonzero(mask)
        d2 = np.sum((self._pts[idx] - np.asarray(p, dtype=float)) ** 2, axis=1)
        self.progress = max(self.progress, float(self._s[idx[np.argmin(d2)]]))
        return self.progress

    def point_at(self, s: float) -> np.ndarray:
        return point_at_arclength(self.route, s)

    def distance(self, p) -> float:
        return project_arclength(self.route, p)[1]

    def local_goal(self, grid: OccupancyGrid, distance: float, stride: float = 0.1) -> np.ndarray:
        """First free route point distance ahead of progress; searches forward, then back."""
        target = min(self.progress + distance, self.total)
        forward = np.append(np.arange(target, self.total, stride), self.total)
        backward = np.arange(target, self.progress, -stride)
        for s in np.concatenate([forward, backward]):
            p = self.point_at(s)
            if is_free(grid, p):
                return p
        return self.point_at(self.total)


# ------------------------------------------------------------
# Calibration
# ------------------------------------------------------------

def planning_grid(belief: OccupancyGrid, config: SimConfig) -> OccupancyGrid:
    return inflate(belief, config.inflation_radius)


def shortcut_grid(belief: OccupancyGrid, config: SimConfig) -> OccupancyGrid:
    return inflate(belief, config.inflation_radius + config.shortcut_clearance)


def calibrate_planner(scenario: Scenario, config: SimConfig = SimConfig(), station_spacing: float = 1.0) -> Tuple[int, float]:
    """
    Iterations to first solution over route stations on the unperturbed map, scaled
    by calibration_margin, become min_iterations; c_iter makes that many iterations
    take exactly dt_g.
    """
    grid = planning_grid(scenario.known_map, config)
    pcfg = replace(config.planner_config(), min_iterations=1)
    tracker = RouteTracker(scenario.route)
    worst = 0
    for s in np.arange(0.0, tracker.total, station_spacing):
        pos = tracker.point_at(s)
        if not is_free(grid, pos):
            continue
        tracker.progress = float(s)
        goal = tracker.local_goal(grid, config.local_goal_distance)
        if np.linalg.norm(goal - pos) < config.goal_radius:
            continue
        for k in range(config.calibration_seeds):
            rng = derive_rng(scenario.seeds[0], "calibrate", round(float(s), 6), k)
            try:
                result = run_rrt_star(grid, pos, goal, pcfg, rng)
            except (InvalidEndpoint, PlanTimeout) as e:
                logger.debug("calibration station s=%.1f skipped: %s", s, e)
                continue
            worst = max(worst, result.first_solution_iteration)
    if worst == 0:
        raise ScenarioError("route", "no route station could be planned from; cannot calibrate the planner")
    min_iterations = max(1, int(math.ceil(config.calibration_margin * worst)))
    c_iter = scenario.dt_g / min_iterations
    logger.info("calibrated planner for '%s': min_iterations=%d, c_iter=%.3e s", scenario.name, min_iterations, c_iter)
    return min_iterations, c_iter


def ensure_calibrated(scenario: Scenario, config: SimConfig) -> SimConfig:
    if config.min_iterations is not None and config.c_iter is not None:
        return config
    m, c = calibrate_planner(scenario, config)
    return replace(config, min_iterations=config.min_iterations or m,
                   c_iter=config.c_iter if config.c_iter is not None else c)


# ------------------------------------------------------------
# Co-simulation
# ------------------------------------------------------------

@dataclass
class RunMetrics:
    f_plan: float
    recovery: bool
    time_to_recovery: float
    collisions: int
    min_command_rate: float
    final_goal_error: float
    command_rate: float = 0.0
    mean_v: float = 0.0
    duration: float = 0.0
    replans: int = 0
    plan_failures: int = 0
    reached_goal: bool = False


@dataclass
class RunResult:
    scenario: str
    mode: str
    seed: int
    metrics: RunMetrics
    trajectory: List[Tuple[float, float, float, float, float, float]] = field(default_factory=list)
    events: List[SupervisorEvent] = field(default_factory=list)
    plan_log: List[Tuple[float, str, int]] = field(default_factory=list)


def resolve_perturbation(p, state: VehicleState):
    if isinstance(p, LateralTeleport) and p.station_x is not None:
        return CornerTrap(p.station_x, p.centerline_y + p.offset, 0.0)
    if isinstance(p, LateralTeleport):
        dy = p.centerline_y + p.offset - state.y
        direction = (math.pi / 2 if dy >= 0 else -math.pi / 2) - state.theta
        return Translate(abs(dy), direction)
    if isinstance(p, TrapApproach):
        s = p.severity
        return CornerTrap(state.x + s * (p.x - state.x), state.y + s * (p.y - state.y),
                          state.theta + s * wrap_angle(p.theta - state.theta))
    return p


def _fire(sp: ScheduledPerturbation, state: VehicleState, truth: OccupancyGrid) -> Optional[VehicleState]:
    p = resolve_perturbation(sp.perturbation, state)
    if not (sp.clip_to_free and isinstance(p, Translate)):
        return apply_perturbation(state, p, truth)
    for _ in range(40):
        try:
            return apply_perturbation(state, p, truth)
        except (PerturbationIntoObstacle, OutOfBounds):
            p = Translate(0.9 * p.distance, p.direction)
    return None


def _due(sp: ScheduledPerturbation, fired: bool, t: float, x: float, boundary: bool) -> bool:
    ready = (sp.time is None or t >= sp.time - 1e-12) and (sp.min_x is None or x >= sp.min_x)
    if sp.every_cycle_until is not None:
        return boundary and ready and t <= sp.every_cycle_until + 1e-12
    return ready and not fired


def run_scenario(scenario: Scenario, mode: str, seed: int, config: SimConfig = SimConfig()) -> RunResult:
    """
    Fixed-step loop on integer ticks: the controller acts every tick, the planner is
    started at cycle boundaries when idle and its result is delivered after the
    simulated latency c_iter * iterations.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode '{mode}', expected one of {MODES}")
    config = ensure_calibrated(scenario, config)
    P = scenario.ticks_per_cycle
    dt = scenario.dt_c
    duration = config.duration if config.duration is not None else scenario.duration
    max_ticks = P * int(math.ceil(round(duration / dt, 6) / P))
    pcfg = config.planner_config()
    gains = config.steering_gains()
    fov = math.radians(config.fov_half_angle_deg)

    state = VehicleState(*scenario.start, v_max=scenario.nominal_speed)
    goal = np.asarray(scenario.goal, dtype=float)
    belief = scenario.known_map
    grid = planning_grid(belief, config)
    tracker = RouteTracker(scenario.route)
    sup = Supervisor(config.supervisor_config(scenario), state.position) if mode == "sbamp" else None

    latest_path = None
    pending: Optional[Tuple[int, Any]] = None
    fired = [False] * len(scenario.schedule)
    last_perturb_t: Optional[float] = None
    returned_t: Optional[float] = None
    reached_at: Optional[float] = None
    replans = failures = commands = collisions = 0
    valid_in_cycle = 0
    cycle_rates: List[float] = []
    speed_sum = 0.0
    trajectory = []
    plan_log = []

    def latency(iterations: int) -> int:
        return max(1, int(math.ceil(config.c_iter * iterations / dt - 1e-9)))

    tick = 0
    end_tick = max_ticks
    for tick in range(max_ticks + 1):
        t = tick * dt
        boundary = tick % P == 0

        if pending is not None and tick >= pending[0]:
            path = pending[1]
            pending = None
            if path is not None:
                replans += 1
                plan_log.append((t, "delivered", len(path)))
                if sup is not None:
                    sup.on_new_path(path, state.position, t)
                else:
                    latest_path = path

        if boundary:
            if tick > 0:
                cycle_rates.append(valid_in_cycle / scenario.dt_g)
                valid_in_cycle = 0
            if reached_at is not None or tick == max_ticks:
                end_tick = tick
                break

        for k, sp in enumerate(scenario.schedule):
            if _due(sp, fired[k], t, state.x, boundary):
                fired[k] = True
                moved = _fire(sp, state, scenario.truth)
                if moved is not None:
                    state = moved
                    last_perturb_t = t
                    returned_t = t if tracker.distance(state.position) <= config.corridor_tolerance else None
        tracker.update(state.position)

        if boundary and pending is None and reached_at is None:
            if scenario.sensing:
                belief = integrate_scan(belief, simulate_scan(scenario.truth, state))
                grid = planning_grid(belief, config)
            local_goal = tracker.local_goal(grid, config.local_goal_distance)
            try:
                result = run_rrt_star(grid, state.position, local_goal, pcfg, planner_rng(seed, tick // P), stamp=t)
                path = result.path
                if config.shortcut_paths:
                    path = shortcut_path(shortcut_grid(belief, config), path)
                pending = (tick + latency(result.iterations), path)
                plan_log.append((t, "planned", result.iterations))
            except InvalidEndpoint as e:
                failures += 1
                plan_log.append((t, "invalid_endpoint", 0))
                logger.debug("t=%.3f plan rejected: %s", t, e)
            except PlanTimeout as e:
                failures += 1
                pending = (tick + latency(e.iterations), None)
                plan_log.append((t, "timeout", e.iterations))

        if sup is not None:
            xi_dot = sup.control_step(state.position, t)
            cmd = ds_to_command(state, xi_dot, gains)
            valid = True
        else:
            cmd = None
            if latest_path is not None:
                cmd = pure_pursuit_command(state, latest_path.waypoints, config.lookahead, fov,
                                           config.path_valid_tolerance)
            valid = cmd is not None
            if cmd is None:
                cmd = DriveCommand(0.0, 0.0)
        if reached_at is not None:
            cmd = DriveCommand(0.0, 0.0)
        if valid:
            commands += 1
            valid_in_cycle += 1
        speed_sum += cmd.v
        trajectory.append((t, state.x, state.y, state.theta, cmd.v, cmd.delta))

        state = step(state, cmd, dt)
        if in_collision(scenario.truth, state):
            collisions = 1
            end_tick = tick + 1
            logger.debug("collision at t=%.3f (%.3f, %.3f)", t + dt, state.x, state.y)
            break

        if last_perturb_t is not None and returned_t is None \
                and tracker.distance(state.position) <= config.corridor_tolerance:
            returned_t = t + dt
        if (scenario.stop_at_goal and reached_at is None
                and np.linalg.norm(state.position - goal) <= config.goal_tolerance
                and tracker.progress >= tracker.total - config.local_goal_distance):
            reached_at = t + dt

    duration = end_tick * dt
    control_ticks = len(trajectory)
    reached = reached_at is not None
    if collisions:
        recovery, t_rec = False, math.inf
    elif last_perturb_t is None:
        recovery, t_rec = reached, (0.0 if reached else math.inf)
    else:
        recovery = reached and returned_t is not None
        t_rec = returned_t - last_perturb_t if recovery else math.inf

    metrics = RunMetrics(
        f_plan=replans / duration if duration > 0 else 0.0,
        recovery=recovery,
        time_to_recovery=t_rec,
        collisions=collisions,
        min_command_rate=min(cycle_rates) if cycle_rates else 0.0,
        final_goal_error=float(np.linalg.norm(state.position - goal)),
        command_rate=commands / duration if duration > 0 else 0.0,
        mean_v=speed_sum / control_ticks if control_ticks else 0.0,
        duration=duration,
        replans=replans,
        plan_failures=failures,
        reached_goal=reached,
    )
    return RunResult(scenario.name, mode, seed, metrics, trajectory,
                     list(sup.events) if sup is not None else [], plan_log)


# ------------------------------------------------------------
# Fan-out
# ------------------------------------------------------------

def _run_metrics(scenario: Scenario, mode: str, seed: int, config: SimConfig) -> RunMetrics:
    return run_scenario(scenario, mode, seed, config).metrics


def run_many(jobs: Sequence[Tuple[Scenario, str, int]], config: SimConfig, desc: str = "runs",
             progress: bool = False) -> List[RunMetrics]:
    """Independent seeded runs; results come back in job order."""
    items = tqdm(jobs, desc=desc, disable=not progress)
    if config.n_jobs == 1:
        return [_run_metrics(s, m, seed, config) for s, m, seed in items]
    return Parallel(n_jobs=config.n_jobs)(delayed(_run_metrics)(s, m, seed, config) for s, m, seed in items)


# ------------------------------------------------------------
# Experiment 1: lateral teleports vs replanning rate
# ------------------------------------------------------------

def experiment1(dd_list: Sequence[float] = EXP1_DELTA_D, runs: int = RUNS_PER_POINT, seed: int = 0,
                config: SimConfig = SimConfig(), modes: Sequence[str] = MODES,
                progress: bool = False) -> List[Dict[str, Any]]:
    if not dd_list:
        raise ValueError("dd_list must not be empty")
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    config = ensure_calibrated(straightaway_scenario(0.0), config)

    keys, jobs = [], []
    for mode in modes:
        for dd in dd_list:
            scenario = straightaway_scenario(float(dd), runs=runs)
            for k in range(runs):
                keys.append((mode, float(dd), k))
                jobs.append((scenario, mode, run_seed(seed, k)))
    metrics = run_many(jobs, config, "experiment1", progress)

    rows = []
    for (mode, dd, k), m in zip(keys, metrics):
        rows.append({"mode": mode, "delta_d": dd, "run": k, "f_plan_hz": m.f_plan,
                     "mean_v_mps": m.mean_v, "command_rate_hz": m.command_rate})
    for point in summarize_experiment1(rows):
        logger.info("exp1 %-8s dd=%.2f f_plan=%.2f Hz command_rate=%.1f Hz v=%.2f m/s",
                    point["mode"], point["delta_d"], point["f_plan_mean"], point["command_rate_mean"],
                    point["mean_v_mean"])
    return rows


def summarize_experiment1(rows: Sequence[Mapping[str, Any]]) -> List[Dict[str, Any]]:
    """Mean and standard deviation per (mode, delta_d); this is the f_plan-vs-offset plot data."""
    groups: Dict[Tuple[str, float], List[Mapping[str, Any]]] = {}
    for r in rows:
        groups.setdefault((r["mode"], r["delta_d"]), []).append(r)
    out = []
    for (mode, dd), rs in groups.items():
        f = np.array([r["f_plan_hz"] for r in rs])
        v = np.array([r["mean_v_mps"] for r in rs])
        c = np.array([r["command_rate_hz"] for r in rs])
        out.append({"mode": mode, "delta_d": dd, "f_plan_mean": float(f.mean()), "f_plan_std": float(f.std()),
                    "mean_v_mean": float(v.mean()), "mean_v_std": float(v.std()),
                    "command_rate_mean": float(c.mean())})
    return out


# ------------------------------------------------------------
# Experiment 2: failure thresholds
# ------------------------------------------------------------

@dataclass
class Experiment2Result:
    mode: str
    disturbance: str
    threshold: float
    rows: List[Dict[str, Any]]


def _corridor_point(mode: str, disturbance: str, magnitude: float, seeds: Sequence[int],
                    config: SimConfig) -> Dict[str, Any]:
    scenario = corridor_scenario(disturbance, magnitude, seeds)
    results = []
    for s in seeds:
        try:
            results.append(run_scenario(scenario, mode, s, config).metrics)
        except PerturbationIntoObstacle as e:
            logger.warning("%s %s magnitude %.3f: %s", mode, disturbance, magnitude, e)
            results.append(RunMetrics(0.0, False, math.inf, 0, 0.0, math.inf))
    recovered = all(m.recovery for m in results)
    times = [m.time_to_recovery for m in results if m.recovery]
    return {"mode": mode, "disturbance": disturbance, "magnitude": float(magnitude), "recovered": recovered,
            "t_recover_s": float(np.mean(times)) if recovered and times else math.inf,
            "collisions": int(sum(m.collisions for m in results))}


def experiment2(mode: str, disturbance: str, seeds: Sequence[int] = EXP2_SEEDS,
                config: SimConfig = SimConfig(), bisect_steps: int = EXP2_BISECT_STEPS,
                max_magnitude: Optional[float] = None) -> Experiment2Result:
    """Bisect for the largest disturbance magnitude every seed still recovers from."""
    if mode not in MODES:
        raise ValueError(f"unknown mode '{mode}', expected one of {MODES}")
    if disturbance not in DISTURBANCES:
        raise ValueError(f"unknown disturbance '{disturbance}', expected one of {DISTURBANCES}")
    config = ensure_calibrated(corridor_scenario(None, 0.0, seeds), config)
    hi = EXP2_MAX_MAGNITUDE[disturbance] if max_magnitude is None else max_magnitude

    rows = [_corridor_point(mode, disturbance, 0.0, seeds, config)]
    if not rows[0]["recovered"]:
        logger.warning("%s does not recover from a zero %s disturbance", mode, disturbance)
        return Experiment2Result(mode, disturbance, 0.0, rows)

    rows.append(_corridor_point(mode, disturbance, hi, seeds, config))
    lo = 0.0
    if rows[-1]["recovered"]:
        lo = hi
    else:
        for _ in range(bisect_steps):
            mid = 0.5 * (lo + hi)
            rows.append(_corridor_point(mode, disturbance, mid, seeds, config))
            if rows[-1]["recovered"]:
                lo = mid
            else:
                hi = mid
    logger.info("exp2 %s %s: threshold %.3f", mode, disturbance, lo)
    return Experiment2Result(mode, disturbance, lo, rows)


# ------------------------------------------------------------
# Experiment 3: randomized shoves on the loop track
# ------------------------------------------------------------

@dataclass
class Experiment3Result:
    rows: List[Dict[str, Any]]
    recovery_rate: float
    collisions: int


def experiment3(seed_count: int = EXP3_SEEDS, mode: str = "sbamp", seed: int = 0,
                config: SimConfig = SimConfig(), magnitude_scale: float = 1.0, obstacle: bool = True,
                progress: bool = False) -> Experiment3Result:
    if seed_count < 1:
        raise ValueError(f"seed_count must be >= 1, got {seed_count}")
    config = ensure_calibrated(loop_scenario(seed, 0.0, obstacle=False), config)
    seeds = [run_seed(seed, k) for k in range(seed_count)]
    jobs = [(loop_scenario(s, magnitude_scale, obstacle), mode, s) for s in seeds]
    metrics = run_many(jobs, config, "experiment3", progress)

    rows = [{"seed": s, "recovered": m.recovery, "collisions": m.collisions, "t_recover_s": m.time_to_recovery}
            for s, m in zip(seeds, metrics)]
    rate = sum(r["recovered"] for r in rows) / len(rows)
    collisions = sum(r["collisions"] for r in rows)
    logger.info("exp3 %s: recovery rate %.2f over %d seeds, %d collision(s)", mode, rate, len(rows), collisions)
    return Experiment3Result(rows, rate, collisions)


# ------------------------------------------------------------
# CSV output
# ------------------------------------------------------------

def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(rows: Sequence[Mapping[str, Any]], columns: Sequence[str], filename) -> None:
    with open(filename, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for r in rows:
            writer.writerow([_fmt(r[c]) for c in columns])


def read_rows(filename) -> List[Dict[str, str]]:
    with open(filename, "r", newline="") as f:
        return list(csv.DictReader(f))


def metrics_row(result: RunResult) -> Dict[str, Any]:
    return {"scenario": result.scenario, "mode": result.mode, "seed": result.seed, **asdict(result.metrics)}


METRICS_COLUMNS = ["scenario", "mode", "seed"] + [f.name for f in fields(RunMetrics)]
