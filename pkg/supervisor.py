import csv
import logging
import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

import ds
from ds import FitConfig, MixtureModel
from planner import WaypointPath, cumulative_arclength, project_arclength

logger = logging.getLogger(__name__)

# ------------------------------------------------------------
# Defaults
# ------------------------------------------------------------

DT_CONTROL = 1.0 / 60.0     # s
DT_PLANNER = 1.0            # s
N0 = 1
BLEND_WINDOW = 0.1          # s
WAYPOINT_RADIUS = 0.3       # m
V_TOL = 1e-9
NOMINAL_SPEED = 1.0         # m/s

EVENT_COLUMNS = ["t", "event", "detail"]
EVENT_KINDS = ("switch", "defer", "fit_fail", "waypoint_advance")


class RecoverableFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class SupervisorConfig:
    dt_c: float = DT_CONTROL
    dt_g: float = DT_PLANNER
    tau_d: Optional[float] = None       # None -> min(20 * dt_c, dt_g)
    n0: int = N0
    blend_window: float = BLEND_WINDOW
    waypoint_radius: float = WAYPOINT_RADIUS
    count_waypoint_advance: bool = True
    v_tol: float = V_TOL
    speed_gain: float = 1.0
    n_components: int = ds.N_COMPONENTS
    eps_stab: float = ds.EPS_STAB
    nominal_speed: float = NOMINAL_SPEED
    sample_spacing: Optional[float] = None   # None -> nominal_speed / DEMO_RATE_HZ
    fit: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        if not self.dt_c < self.dwell_time <= self.dt_g:
            raise ValueError(f"need dt_c < tau_d <= dt_g, got {self.dt_c} < {self.dwell_time} <= {self.dt_g}")
        if self.n0 < 1:
            raise ValueError(f"n0 must be >= 1, got {self.n0}")
        if self.blend_window < 0:
            raise ValueError(f"blend_window must be >= 0, got {self.blend_window}")
        if self.speed_gain <= 0:
            raise ValueError(f"speed_gain must be > 0, got {self.speed_gain}")
        if self.waypoint_radius <= 0:
            raise ValueError(f"waypoint_radius must be > 0, got {self.waypoint_radius}")

    @property
    def dwell_time(self) -> float:
        if self.tau_d is not None:
            return self.tau_d
        return min(20 * self.dt_c, self.dt_g)

    @property
    def demo_spacing(self) -> float:
        if self.sample_spacing is not None:
            return self.sample_spacing
        return self.nominal_speed / ds.DEMO_RATE_HZ


class SupervisorEvent(NamedTuple):
    t: float
    event: str
    detail: str


@dataclass
class LyapunovReport:
    decreasing: bool
    final_v: float
    violations: List[Tuple[float, float, float, float]]   # (t_start, t_end, V_start, V_end)
    max_step_increase: float


# ------------------------------------------------------------
# Geometry
# ------------------------------------------------------------

def first_waypoint_ahead(path: WaypointPath, p, skip_radius: float = 0.0) -> int:
    """First waypoint past p's projection onto the path, skipping ones already within skip_radius."""
    pts = np.asarray(path.waypoints, dtype=float)
    if len(pts) < 2:
        return len(pts) - 1
    s_proj, _ = project_arclength(pts, p)
    s_wp = cumulative_arclength(pts)
    p = np.asarray(p, dtype=float)
    for k in range(len(pts)):
        if s_wp[k] > s_proj + 1e-12 and np.linalg.norm(pts[k] - p) >= skip_radius:
            return k
    return len(pts) - 1


# ------------------------------------------------------------
# Supervisor
# ------------------------------------------------------------

class Supervisor:
    """
    Switching logic between global paths and the local mixture controller.

    New paths are refit, recentred on the first waypoint ahead of the vehicle and
    switched in only when the average dwell-time bound allows; otherwise they wait
    as the pending path. Each switch starts a blend window over which the command
    magnitude moves from the last emitted speed to the new field's speed.
    """

    def __init__(self, config: SupervisorConfig, initial_position):
        self.config = config
        self.active_model: MixtureModel = ds.hold_model(initial_position, eps_stab=config.eps_stab)
        self.current_path: Optional[WaypointPath] = None
        self.pending_path: Optional[WaypointPath] = None
        self.active_waypoint_index = 0
        self.switch_times: List[float] = []
        self.last_velocity = np.zeros(2)
        self.events: List[SupervisorEvent] = []
        self._fitted: Optional[MixtureModel] = None
        self._blend_start: Optional[float] = None
        self._blend_from = 0.0
        self._deferred_logged = False

    @property
    def tau_d(self) -> float:
        return self.config.dwell_time

    @property
    def attractor(self) -> np.ndarray:
        return self.active_model.attractor

    def _event(self, t: float, kind: str, detail: str = ""):
        self.events.append(SupervisorEvent(float(t), kind, detail))

    # -------------------------
    # Dwell time
    # -------------------------

    def dwell_admissible(self, t1: float, t2: float) -> bool:
        if not t1 < t2:
            raise ValueError(f"need t1 < t2, got {t1}, {t2}")
        count = sum(1 for s in self.switch_times if t1 <= s <= t2)
        return count <= self.config.n0 + (t2 - t1) / self.tau_d + 1e-9

    def switch_admissible(self, t: float) -> bool:
        """Whether recording one more switch at t keeps every window within the bound."""
        times = self.switch_times
        if times and not t > times[-1]:
            return False
        n = len(times)
        for i, t_i in enumerate(times):
            # switches in [t_i, t] including the prospective one
            if (n - i) + 1 > self.config.n0 + (t - t_i) / self.tau_d + 1e-9:
                return False
        return self.config.n0 >= 1

    def _record_switch(self, t: float, kind: str, detail: str):
        self.switch_times.append(float(t))
        self._start_blend(t)
        self._event(t, kind, detail)

    def _start_blend(self, t: float):
        self._blend_start = float(t)
        self._blend_from = float(np.linalg.norm(self.last_velocity))

    # -------------------------
    # Path intake
    # -------------------------

    def on_new_path(self, path: WaypointPath, vehicle_pos, t: float) -> "Supervisor":
        if path.same_as(self.current_path) or path.same_as(self.pending_path):
            return self
        if len(path) == 0 or not np.all(np.isfinite(path.waypoints)):
            raise ValueError("path must contain finite waypoints")
        self.pending_path = path
        self._deferred_logged = False
        self._apply_pending(vehicle_pos, t)
        return self

    def _apply_pending(self, vehicle_pos, t: float):
        path = self.pending_path
        if path is None:
            return
        if not self.switch_admissible(t):
            if not self._deferred_logged:
                self._event(t, "defer", f"stamp={path.stamp!r}")
                self._deferred_logged = True
            return

        try:
            model = self._refit(path)
        except RecoverableFitError as e:
            logger.warning("fit failed at t=%.3f, keeping previous model: %s", t, e)
            self._event(t, "fit_fail", str(e))
            self.pending_path = None
            return

        idx = first_waypoint_ahead(path, vehicle_pos, self.config.waypoint_radius)
        self._fitted = model
        self.active_model = ds.shift_attractor(model, path.waypoints[idx])
        self.active_waypoint_index = idx
        self.current_path = path
        self.pending_path = None
        self._record_switch(t, "switch", f"stamp={path.stamp!r};waypoint={idx}")

    def _refit(self, path: WaypointPath) -> MixtureModel:
        cfg = self.config
        try:
            demo = ds.synthesize_demo(path, cfg.nominal_speed, cfg.demo_spacing)
            K = max(1, min(cfg.n_components, len(demo) // 4))
            return ds.fit(demo, K, cfg.eps_stab, cfg.fit, warm_start=self._fitted)
        except (ValueError, np.linalg.LinAlgError) as e:
            raise RecoverableFitError(f"{type(e).__name__}: {e}") from e

    # -------------------------
    # Control
    # -------------------------

    def _passed_attractor(self, xi: np.ndarray) -> bool:
        # the vehicle projects onto the path at or beyond the active waypoint
        path = self.current_path
        s, _ = project_arclength(path.waypoints, xi)
        return s >= cumulative_arclength(path.waypoints)[self.active_waypoint_index] - 1e-9

    def _maybe_advance(self, xi: np.ndarray, t: float):
        path = self.current_path
        if path is None or self.active_waypoint_index >= len(path) - 1:
            return
        if np.linalg.norm(xi - self.attractor) >= self.config.waypoint_radius and not self._passed_attractor(xi):
            return
        if self.config.count_waypoint_advance and not self.switch_admissible(t):
            return
        idx = self.active_waypoint_index + 1
        self.active_model = ds.shift_attractor(self.active_model, path.waypoints[idx])
        self.active_waypoint_index = idx
        if self.config.count_waypoint_advance:
            self._record_switch(t, "waypoint_advance", f"waypoint={idx}")
        else:
            self._start_blend(t)
            self._event(t, "waypoint_advance", f"waypoint={idx}")

    def control_step(self, xi, t: float) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        if self.pending_path is not None:
            self._apply_pending(xi, t)
        self._maybe_advance(xi, t)

        v = self.config.speed_gain * ds.evaluate(self.active_model, xi)
        if self._blend_start is not None and t - self._blend_start < self.config.blend_window:
            alpha = max(0.0, (t - self._blend_start) / self.config.blend_window)
            target = (1.0 - alpha) * self._blend_from + alpha * float(np.linalg.norm(v))
            v = _with_magnitude(v, target, self.last_velocity)

        self.last_velocity = v
        return v

    # -------------------------
    # Monitoring
    # -------------------------

    def goal(self) -> np.ndarray:
        if self.current_path is not None:
            return np.asarray(self.current_path.waypoints[-1], dtype=float)
        return self.attractor

    def lyapunov_monitor(self, trajectory: Sequence[Tuple[float, Sequence[float]]], goal=None) -> LyapunovReport:
        return lyapunov_monitor(trajectory, self.goal() if goal is None else goal,
                                self.switch_times, self.config.v_tol)


def _with_magnitude(v: np.ndarray, magnitude: float, fallback: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n > 0:
        return v * (magnitude / n)
    n_fb = float(np.linalg.norm(fallback))
    if n_fb > 0:
        return fallback * (magnitude / n_fb)
    return np.zeros(2)


def lyapunov_monitor(trajectory, goal, switch_times: Sequence[float] = (), v_tol: float = V_TOL) -> LyapunovReport:
    """
    V(t) = |xi(t) - goal|^2 checked over each switch-free interval of a time-sorted
    trajectory. An interval violates descent when V fails to drop by more than v_tol
    (unless V is already within v_tol of zero).
    """
    goal = np.asarray(goal, dtype=float)
    if len(trajectory) == 0:
        return LyapunovReport(True, math.nan, [], 0.0)
    t = np.array([float(s) for s, _ in trajectory])
    if np.any(np.diff(t) < 0):
        raise ValueError("trajectory must be time-sorted")
    V = np.array([float(np.sum((np.asarray(x, dtype=float) - goal) ** 2)) for _, x in trajectory])

    cuts = sorted(s for s in switch_times if t[0] < s <= t[-1])
    edges = [t[0]] + cuts + [math.inf]
    violations = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        idx = np.flatnonzero((t >= lo) & (t < hi))
        if len(idx) < 2:
            continue
        v0, v1 = V[idx[0]], V[idx[-1]]
        if v0 > v_tol and v1 > v0 - v_tol:
            violations.append((float(t[idx[0]]), float(t[idx[-1]]), float(v0), float(v1)))

    steps = np.diff(V)
    return LyapunovReport(
        decreasing=not violations,
        final_v=float(V[-1]),
        violations=violations,
        max_step_increase=float(max(0.0, steps.max())) if len(steps) else 0.0,
    )


# ------------------------------------------------------------
# Event log
# ------------------------------------------------------------

def write_events(events: Sequence[SupervisorEvent], filename) -> None:
    with open(filename, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(EVENT_COLUMNS)
        for e in events:
            writer.writerow([repr(e.t), e.event, e.detail])


def read_events(filename) -> List[SupervisorEvent]:
    with open(filename, "r", newline="") as f:
        reader = csv.DictReader(f)
        events = []
        for row in reader:
            if row["event"] not in EVENT_KINDS:
                raise ValueError(f"unknown event kind {row['event']!r}")
            events.append(SupervisorEvent(float(row["t"]), row["event"], row["detail"]))
        return events
