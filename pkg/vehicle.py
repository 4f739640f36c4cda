import csv
import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from grid import CellState, OccupancyGrid, OutOfBounds, RangeScan
from planner import point_at_arclength, project_arclength

# ------------------------------------------------------------
# Defaults
# ------------------------------------------------------------

WHEELBASE = 0.33          # m, 1/10-scale car
V_MAX = 1.0               # m/s
DELTA_MAX = 0.4           # rad
K_DELTA = 2.0             # steering gain on heading error
MIN_SPEED_FACTOR = 0.25   # floor on the slow-down gate when pointed away

SCAN_BEAMS = 812
SCAN_FOV = math.radians(270.0)
SCAN_MAX_RANGE = 10.0     # m

LOOKAHEAD = 0.6           # m, pure pursuit
FOV_HALF_ANGLE = math.radians(60.0)

TRAJECTORY_COLUMNS = ["t", "x", "y", "theta", "v_cmd", "delta_cmd"]


class PerturbationIntoObstacle(ValueError):
    pass


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2 * math.pi)
    if w <= 0:
        w += 2 * math.pi
    return w - math.pi


# ------------------------------------------------------------
# Types
# ------------------------------------------------------------

@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    theta: float
    wheelbase: float = WHEELBASE
    v_max: float = V_MAX
    delta_max: float = DELTA_MAX

    def __post_init__(self):
        if not self.wheelbase > 0:
            raise ValueError(f"wheelbase must be > 0, got {self.wheelbase}")
        if not self.v_max > 0 or not self.delta_max > 0:
            raise ValueError(f"v_max and delta_max must be > 0, got {self.v_max}, {self.delta_max}")
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def with_pose(self, x: float, y: float, theta: float) -> "VehicleState":
        return replace(self, x=float(x), y=float(y), theta=float(theta))


class DriveCommand(NamedTuple):
    v: float        # m/s
    delta: float    # rad


@dataclass(frozen=True)
class SteeringGains:
    k_delta: float = K_DELTA
    min_speed_factor: float = MIN_SPEED_FACTOR

    def __post_init__(self):
        if not self.k_delta > 0:
            raise ValueError(f"k_delta must be > 0, got {self.k_delta}")
        if not 0 <= self.min_speed_factor <= 1:
            raise ValueError(f"min_speed_factor must be in [0, 1], got {self.min_speed_factor}")


@dataclass(frozen=True)
class Translate:
    distance: float                   # m
    direction: float = math.pi / 2    # rad, relative to heading; pi/2 is to the left


@dataclass(frozen=True)
class Rotate:
    angle: float                      # rad


@dataclass(frozen=True)
class CornerTrap:
    x: float
    y: float
    theta: float


Perturbation = Union[Translate, Rotate, CornerTrap]


# ------------------------------------------------------------
# Kinematics
# ------------------------------------------------------------

def _derivative(pose: np.ndarray, v: float, tan_delta: float, wheelbase: float) -> np.ndarray:
    return np.array([v * math.cos(pose[2]), v * math.sin(pose[2]), v / wheelbase * tan_delta])


def heading_rate(state: VehicleState, cmd: DriveCommand) -> float:
    return cmd.v / state.wheelbase * math.tan(cmd.delta)


def step(state: VehicleState, cmd: DriveCommand, dt: float) -> VehicleState:
    """One RK4 step of the kinematic bicycle."""
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    if abs(cmd.v) > state.v_max + 1e-12 or abs(cmd.delta) > state.delta_max + 1e-12:
        raise ValueError(f"command {cmd} exceeds limits v_max={state.v_max}, delta_max={state.delta_max}")
    if cmd.v == 0:
        return state

    tan_delta = math.tan(cmd.delta)
    L = state.wheelbase
    p = np.array([state.x, state.y, state.theta])
    k1 = _derivative(p, cmd.v, tan_delta, L)
    k2 = _derivative(p + 0.5 * dt * k1, cmd.v, tan_delta, L)
    k3 = _derivative(p + 0.5 * dt * k2, cmd.v, tan_delta, L)
    k4 = _derivative(p + dt * k3, cmd.v, tan_delta, L)
    p = p + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return state.with_pose(p[0], p[1], p[2])


def ds_to_command(state: VehicleState, xi_dot, gains: SteeringGains = SteeringGains()) -> DriveCommand:
    xi_dot = np.asarray(xi_dot, dtype=float)
    speed = float(np.linalg.norm(xi_dot))
    if speed == 0:
        return DriveCommand(0.0, 0.0)
    v = min(speed, state.v_max)
    e = wrap_angle(math.atan2(xi_dot[1], xi_dot[0]) - state.theta)
    delta = float(np.clip(gains.k_delta * e, -state.delta_max, state.delta_max))
    if abs(e) > math.pi / 2:
        # pointed away: creep at the floor speed
        v *= gains.min_speed_factor
    return DriveCommand(v, delta)


# ------------------------------------------------------------
# Perturbations
# ------------------------------------------------------------

def apply_perturbation(state: VehicleState, p: Perturbation,
                       truth: Optional[OccupancyGrid] = None) -> VehicleState:
    if isinstance(p, Translate):
        heading = state.theta + p.direction
        new = state.with_pose(state.x + p.distance * math.cos(heading),
                              state.y + p.distance * math.sin(heading), state.theta)
    elif isinstance(p, Rotate):
        new = state.with_pose(state.x, state.y, state.theta + p.angle)
    elif isinstance(p, CornerTrap):
        new = state.with_pose(p.x, p.y, p.theta)
    else:
        raise TypeError(f"unknown perturbation {p!r}")

    if truth is not None:
        if not truth.in_bounds((new.x, new.y)):
            raise OutOfBounds(f"perturbation moves the vehicle outside the map to ({new.x:.3f}, {new.y:.3f})")
        if truth.state_at((new.x, new.y)) == CellState.OCCUPIED:
            raise PerturbationIntoObstacle(f"{p} places the vehicle in an occupied cell at ({new.x:.3f}, {new.y:.3f})")
    return new


def in_collision(truth: OccupancyGrid, state: VehicleState) -> bool:
    p = (state.x, state.y)
    return not truth.in_bounds(p) or truth.state_at(p) == CellState.OCCUPIED


# ------------------------------------------------------------
# Sensing
# ------------------------------------------------------------

def simulate_scan(truth: OccupancyGrid, state: VehicleState, n_beams: int = SCAN_BEAMS,
                  fov: float = SCAN_FOV, max_range: float = SCAN_MAX_RANGE) -> RangeScan:
    """
    Ray-march every beam against the true map at half-cell steps.

    Beams that leave the map or see nothing report max_range.
    """
    angles = np.linspace(-fov / 2, fov / 2, n_beams)
    step_len = 0.5 * truth.resolution
    d = np.arange(step_len, max_range, step_len)
    heading = state.theta + angles
    xs = state.x + np.cos(heading)[:, None] * d[None]
    ys = state.y + np.sin(heading)[:, None] * d[None]
    ii = np.floor((xs - truth.origin[0]) / truth.resolution).astype(int)
    jj = np.floor((ys - truth.origin[1]) / truth.resolution).astype(int)
    inside = (ii >= 0) & (ii < truth.width) & (jj >= 0) & (jj < truth.height)

    occupied = np.zeros_like(inside)
    occupied[inside] = truth.cells[jj[inside], ii[inside]] == CellState.OCCUPIED
    # nothing past the first exit from the map counts
    left = np.cumsum(~inside, axis=1) > 0
    hits = occupied & ~left

    first = np.argmax(hits, axis=1)
    ranges = np.where(hits.any(axis=1), d[first], max_range)
    return RangeScan((state.x, state.y, state.theta), angles, ranges, max_range)


# ------------------------------------------------------------
# Pure pursuit
# ------------------------------------------------------------

def pure_pursuit_command(state: VehicleState, points, lookahead: float = LOOKAHEAD,
                         fov_half_angle: float = FOV_HALF_ANGLE,
                         max_offset: float = math.inf) -> Optional[DriveCommand]:
    """
    Steer toward the path point lookahead metres past the vehicle's projection.

    Returns None when the vehicle has no trackable reference: the path is further
    than max_offset away or the target point is outside the forward field of view.
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) == 0:
        return None
    s, offset = project_arclength(pts, state.position)
    if offset > max_offset:
        return None
    target = point_at_arclength(pts, s + lookahead)
    rel = target - state.position
    ld = float(np.linalg.norm(rel))
    if ld < 1e-9:
        return DriveCommand(0.0, 0.0)
    alpha = wrap_angle(math.atan2(rel[1], rel[0]) - state.theta)
    if abs(alpha) > fov_half_angle:
        return None
    delta = math.atan(2.0 * state.wheelbase * math.sin(alpha) / ld)
    return DriveCommand(state.v_max, float(np.clip(delta, -state.delta_max, state.delta_max)))


# ------------------------------------------------------------
# Trajectory log
# ------------------------------------------------------------

def write_trajectory(rows: Sequence[Sequence[float]], filename) -> None:
    with open(filename, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRAJECTORY_COLUMNS)
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])


def read_trajectory(filename) -> np.ndarray:
    with open(filename, "r", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != TRAJECTORY_COLUMNS:
            raise ValueError(f"unexpected trajectory header {header}")
        return np.array([[float(v) for v in row] for row in reader], dtype=float).reshape(-1, len(TRAJECTORY_COLUMNS))
