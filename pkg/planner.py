import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from grid import OccupancyGrid, is_free, sample_free, segment_free

logger = logging.getLogger(__name__)

# ------------------------------------------------------------
# Defaults
# ------------------------------------------------------------

STEER_STEP = 0.5          # eta, m
REWIRE_GAMMA = 10.0       # gamma_RRT
MAX_ITERATIONS = 2000
GOAL_RADIUS = 0.3         # m
GOAL_BIAS = 0.05

# Un-indexed tail size that triggers a kd-tree rebuild
KD_REBUILD_TAIL = 64

COST_EPS = 1e-12


class InvalidEndpoint(ValueError):
    pass


class PlanTimeout(RuntimeError):
    def __init__(self, message: str, iterations: int):
        super().__init__(message)
        self.iterations = iterations


class EmptyTree(ValueError):
    pass


@dataclass(frozen=True)
class PlannerConfig:
    steer_step: float = STEER_STEP
    rewire_gamma: float = REWIRE_GAMMA
    max_iterations: int = MAX_ITERATIONS
    goal_radius: float = GOAL_RADIUS
    goal_bias: float = GOAL_BIAS
    # Keep refining until this many iterations have run; None runs the full budget.
    min_iterations: Optional[int] = None

    def __post_init__(self):
        if not self.steer_step > 0:
            raise ValueError(f"steer_step must be > 0, got {self.steer_step}")
        if not self.rewire_gamma > 0:
            raise ValueError(f"rewire_gamma must be > 0, got {self.rewire_gamma}")
        if not 0 <= self.goal_bias < 1:
            raise ValueError(f"goal_bias must be in [0, 1), got {self.goal_bias}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.min_iterations is not None and self.min_iterations < 1:
            raise ValueError(f"min_iterations must be >= 1, got {self.min_iterations}")


@dataclass(frozen=True, eq=False)
class WaypointPath:
    waypoints: np.ndarray     # (M, 2)
    cost: float
    stamp: float = 0.0

    @classmethod
    def from_points(cls, points, stamp: float = 0.0) -> "WaypointPath":
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        return cls(pts, path_length(pts), float(stamp))

    def __len__(self):
        return len(self.waypoints)

    def same_as(self, other: Optional["WaypointPath"]) -> bool:
        return (other is not None and self.stamp == other.stamp
                and self.waypoints.shape == other.waypoints.shape
                and bool(np.array_equal(self.waypoints, other.waypoints)))


@dataclass
class PlanResult:
    path: WaypointPath
    iterations: int
    first_solution_iteration: int
    cost_history: List[float] = field(default_factory=list)


def path_length(points) -> float:
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


def cumulative_arclength(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        return np.zeros(len(pts))
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])


def project_arclength(points, p) -> Tuple[float, float]:
    """(arclength, distance) of the closest point on the polyline to p; earliest segment wins ties."""
    pts = np.asarray(points, dtype=float)
    p = np.asarray(p, dtype=float)
    if len(pts) == 1:
        return 0.0, float(np.linalg.norm(p - pts[0]))
    seg = np.diff(pts, axis=0)
    seg_len2 = np.sum(seg * seg, axis=1)
    safe = np.where(seg_len2 > 0, seg_len2, 1.0)
    u = np.clip(np.sum((p - pts[:-1]) * seg, axis=1) / safe, 0.0, 1.0)
    closest = pts[:-1] + u[:, None] * seg
    d2 = np.sum((closest - p) ** 2, axis=1)
    k = int(np.argmin(d2))
    s = cumulative_arclength(pts)
    return float(s[k] + u[k] * math.sqrt(seg_len2[k])), float(math.sqrt(d2[k]))


def point_at_arclength(points, s: float) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    cum = cumulative_arclength(pts)
    if s <= 0 or len(pts) == 1:
        return pts[0].copy()
    if s >= cum[-1]:
        return pts[-1].copy()
    k = int(np.searchsorted(cum, s, side="right")) - 1
    u = (s - cum[k]) / (cum[k + 1] - cum[k])
    return pts[k] + u * (pts[k + 1] - pts[k])


# ------------------------------------------------------------
# Tree
# ------------------------------------------------------------

class Tree:
    """
    RRT* search tree with a kd-tree over all but the newest nodes.

    The kd-tree is rebuilt once the un-indexed tail reaches KD_REBUILD_TAIL nodes;
    queries combine it with a linear scan of the tail.
    """

    def __init__(self, root, capacity: int = 1024):
        self._pos = np.empty((max(capacity, 1), 2))
        self._pos[0] = root
        self.parent: List[Optional[int]] = [None]
        self.cost: List[float] = [0.0]
        self.children: List[List[int]] = [[]]
        self.root = 0
        self._kd: Optional[cKDTree] = None
        self._kd_size = 0

    def __len__(self):
        return len(self.parent)

    @property
    def positions(self) -> np.ndarray:
        return self._pos[:len(self)]

    def position(self, i: int) -> np.ndarray:
        return self._pos[i]

    def add(self, position, parent: int, cost: float) -> int:
        n = len(self)
        if n == len(self._pos):
            grown = np.empty((2 * n, 2))
            grown[:n] = self._pos
            self._pos = grown
        self._pos[n] = position
        self.parent.append(parent)
        self.cost.append(cost)
        self.children.append([])
        self.children[parent].append(n)
        if n + 1 - self._kd_size >= KD_REBUILD_TAIL:
            self._kd = cKDTree(self._pos[:n + 1].copy())
            self._kd_size = n + 1
        return n

    def nearest(self, x) -> int:
        n = len(self)
        if n == 0:
            raise EmptyTree("nearest() on an empty tree")
        x = np.asarray(x, dtype=float)
        candidates = []
        if self._kd is not None:
            d_kd, _ = self._kd.query(x)
            candidates.extend(self._kd.query_ball_point(x, d_kd * (1 + 1e-9) + 1e-12))
        candidates.extend(range(self._kd_size, n))
        idx = np.array(sorted(candidates), dtype=int)
        d2 = np.sum((self._pos[idx] - x) ** 2, axis=1)
        return int(idx[np.argmin(d2)])

    def near(self, x, radius: float) -> List[int]:
        """Indices within radius of x, ascending."""
        x = np.asarray(x, dtype=float)
        found = []
        if self._kd is not None and radius > 0:
            found.extend(self._kd.query_ball_point(x, radius))
        tail = np.arange(self._kd_size, len(self))
        if len(tail):
            d = np.linalg.norm(self._pos[tail] - x, axis=1)
            found.extend(tail[d <= radius].tolist())
        return sorted(found)

    def reparent(self, i: int, new_parent: int, new_cost: float) -> None:
        self.children[self.parent[i]].remove(i)
        self.parent[i] = new_parent
        self.children[new_parent].append(i)
        delta = new_cost - self.cost[i]
        stack = [i]
        while stack:
            k = stack.pop()
            self.cost[k] += delta
            stack.extend(self.children[k])

    def path_to(self, i: int) -> np.ndarray:
        chain = []
        k: Optional[int] = i
        while k is not None:
            chain.append(self._pos[k].copy())
            k = self.parent[k]
        return np.array(chain[::-1])

    def cost_consistency_error(self) -> float:
        """Largest |cost - (parent cost + edge length)| over non-root nodes."""
        worst = 0.0
        for i in range(len(self)):
            p = self.parent[i]
            if p is None:
                continue
            expect = self.cost[p] + float(np.linalg.norm(self._pos[i] - self._pos[p]))
            worst = max(worst, abs(self.cost[i] - expect))
        return worst


# ------------------------------------------------------------
# Primitives
# ------------------------------------------------------------

def nearest(tree: Tree, x) -> int:
    return tree.nearest(x)


def steer(start, toward, eta: float) -> np.ndarray:
    start = np.asarray(start, dtype=float)
    toward = np.asarray(toward, dtype=float)
    d = float(np.linalg.norm(toward - start))
    if d <= eta:
        return toward.copy()
    return start + (toward - start) * (eta / d)


def neighbor_radius(n: int, config: PlannerConfig) -> float:
    if n < 2:
        return 0.0
    return min(config.rewire_gamma * math.sqrt(math.log(n) / n), config.steer_step)


def choose_parent(tree: Tree, x_new, candidates: Sequence[int], grid: OccupancyGrid):
    best, best_cost = None, math.inf
    for k in sorted(set(candidates)):
        c = tree.cost[k] + float(np.linalg.norm(x_new - tree.position(k)))
        if c < best_cost - COST_EPS and segment_free(grid, tree.position(k), x_new):
            best, best_cost = k, c
    return best, best_cost


def rewire(tree: Tree, new_node: int, neighbors: Sequence[int], grid: OccupancyGrid) -> Tree:
    """Re-parent each neighbor whose cost strictly drops when routed through new_node."""
    x_new = tree.position(new_node)
    base = tree.cost[new_node]
    for k in sorted(set(neighbors)):
        if k == new_node or k == tree.parent[new_node]:
            continue
        c = base + float(np.linalg.norm(tree.position(k) - x_new))
        if c < tree.cost[k] - COST_EPS and segment_free(grid, x_new, tree.position(k)):
            tree.reparent(k, new_node, c)
    return tree


# ------------------------------------------------------------
# Planning
# ------------------------------------------------------------

def run_rrt_star(grid: OccupancyGrid, start, goal, config: PlannerConfig,
                 rng: np.random.Generator, stamp: float = 0.0) -> PlanResult:
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    if not is_free(grid, start):
        raise InvalidEndpoint(f"start ({start[0]:.3f}, {start[1]:.3f}) is not in free space")
    if not is_free(grid, goal):
        raise InvalidEndpoint(f"goal ({goal[0]:.3f}, {goal[1]:.3f}) is not in free space")

    free_cells = grid.free_cells()
    tree = Tree(start, capacity=min(config.max_iterations + 1, 65536))
    goal_nodes: List[int] = []
    best_cost = math.inf
    best_node: Optional[int] = None
    first_solution = 0
    history: List[float] = []

    def to_goal(i: int) -> float:
        return tree.cost[i] + float(np.linalg.norm(goal - tree.position(i)))

    def consider_goal(i: int):
        d = float(np.linalg.norm(goal - tree.position(i)))
        if d <= config.goal_radius and segment_free(grid, tree.position(i), goal):
            goal_nodes.append(i)

    if float(np.linalg.norm(goal - start)) <= config.goal_radius:
        consider_goal(0)

    n = 0
    for n in range(1, config.max_iterations + 1):
        if config.goal_bias > 0 and rng.random() < config.goal_bias:
            x_rand = goal
        else:
            x_rand = sample_free(grid, rng, free_cells)

        i_near = tree.nearest(x_rand)
        x_new = steer(tree.position(i_near), x_rand, config.steer_step)
        if not np.array_equal(x_new, tree.position(i_near)) and segment_free(grid, tree.position(i_near), x_new):
            neighbors = tree.near(x_new, neighbor_radius(n, config))
            parent, cost = choose_parent(tree, x_new, neighbors + [i_near], grid)
            if parent is not None:
                new = tree.add(x_new, parent, cost)
                rewire(tree, new, neighbors, grid)
                consider_goal(new)

        if goal_nodes:
            # costs only ever drop under rewiring, so the best total is non-increasing
            best_node = min(goal_nodes, key=lambda i: (to_goal(i), i))
            best_cost = to_goal(best_node)
            if first_solution == 0:
                first_solution = n
        history.append(best_cost)

        if best_node is not None and config.min_iterations is not None and n >= config.min_iterations:
            break

    if best_node is None:
        raise PlanTimeout(f"no path to goal within {config.max_iterations} iterations", iterations=n)

    points = tree.path_to(best_node)
    if not np.array_equal(points[-1], goal):
        points = np.vstack([points, goal])
    path = WaypointPath(points, path_length(points), float(stamp))
    logger.debug("plan: %d iterations, %d nodes, cost %.3f", n, len(tree), path.cost)
    return PlanResult(path, n, first_solution, history)


def plan(grid: OccupancyGrid, start, goal, config: PlannerConfig,
         rng: np.random.Generator, stamp: float = 0.0) -> WaypointPath:
    return run_rrt_star(grid, start, goal, config, rng, stamp).path


def shortcut_path(grid: OccupancyGrid, path: WaypointPath) -> WaypointPath:
    """
    Greedy line-of-sight pruning: from each kept waypoint jump to the farthest
    later waypoint whose connecting segment is free on grid.

    Endpoints and stamp are kept. Never longer than the input.
    """
    pts = path.waypoints
    if len(pts) < 3:
        return path
    kept = [0]
    i = 0
    while i < len(pts) - 1:
        j = len(pts) - 1
        while j > i + 1 and not segment_free(grid, pts[i], pts[j]):
            j -= 1
        kept.append(j)
        i = j
    if len(kept) == len(pts):
        return path
    out = pts[kept]
    return WaypointPath(out, path_length(out), path.stamp)


# ------------------------------------------------------------
# Path dump
# ------------------------------------------------------------

def format_path_csv(path: WaypointPath) -> str:
    lines = [f"# stamp={path.stamp!r},cost={path.cost!r}", "index,x,y"]
    for k, (x, y) in enumerate(path.waypoints):
        lines.append(f"{k},{float(x)!r},{float(y)!r}")
    return "\n".join(lines) + "\n"


def parse_path_csv(text: str) -> WaypointPath:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise ValueError("path CSV must start with a '# stamp=...,cost=...' comment line")
    meta = dict(item.split("=", 1) for item in lines[0][1:].strip().split(","))
    points = []
    for k, ln in enumerate(lines[2:]):
        idx, x, y = ln.split(",")
        if int(idx) != k:
            raise ValueError(f"path CSV row {k} has index {idx}")
        points.append((float(x), float(y)))
    return WaypointPath(np.array(points, dtype=float).reshape(-1, 2), float(meta["cost"]), float(meta["stamp"]))


def save_path(path: WaypointPath, filename) -> None:
    with open(filename, "w", newline="\n") as f:
        f.write(format_path_csv(path))


def load_path(filename) -> WaypointPath:
    with open(filename, "r") as f:
        return parse_path_csv(f.read())
