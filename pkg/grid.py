import logging
import math
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import distance_transform_edt

logger = logging.getLogger(__name__)

# ------------------------------------------------------------
# Defaults
# ------------------------------------------------------------

DEFAULT_RESOLUTION = 0.05      # m per cell
DEFAULT_INFLATION = 0.0        # m

MAP_HEADER_KEYS = ["resolution", "origin_x", "origin_y", "width", "height", "inflation_radius"]
CELL_CHARS = {0: ".", 1: "#", 2: "?"}
CHAR_CELLS = {c: s for s, c in CELL_CHARS.items()}


class CellState(IntEnum):
    FREE = 0
    OCCUPIED = 1
    UNKNOWN = 2


class OutOfBounds(ValueError):
    pass


class EmptyFreeSpace(RuntimeError):
    pass


class MapFormatError(ValueError):
    def __init__(self, line: int, key: str, message: str):
        super().__init__(f"line {line}, key '{key}': {message}")
        self.line = line
        self.key = key


# ------------------------------------------------------------
# Types
# ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """
    Static 2D occupancy grid.

    cells is indexed cells[j, i] where i is the column (x) and j the row (y);
    cell (i, j) covers [origin + (i, j) * resolution, origin + (i + 1, j + 1) * resolution).
    """
    resolution: float
    origin: Tuple[float, float]
    width: int
    height: int
    cells: np.ndarray
    inflation_radius: float = DEFAULT_INFLATION

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError(f"resolution must be > 0, got {self.resolution}")
        if self.inflation_radius < 0:
            raise ValueError(f"inflation_radius must be >= 0, got {self.inflation_radius}")
        if self.cells.shape != (self.height, self.width):
            raise ValueError(
                f"cells shape {self.cells.shape} does not match (height, width) = ({self.height}, {self.width})"
            )

    @classmethod
    def filled(cls, width: int, height: int, resolution: float = DEFAULT_RESOLUTION,
               origin=(0.0, 0.0), state: CellState = CellState.UNKNOWN,
               inflation_radius: float = DEFAULT_INFLATION) -> "OccupancyGrid":
        cells = np.full((height, width), int(state), dtype=np.int8)
        return cls(resolution, (float(origin[0]), float(origin[1])), width, height, cells, inflation_radius)

    @property
    def size_m(self) -> Tuple[float, float]:
        return self.width * self.resolution, self.height * self.resolution

    def copy(self) -> "OccupancyGrid":
        return replace(self, cells=self.cells.copy())

    def world_to_cell(self, p) -> Tuple[int, int]:
        i = math.floor((p[0] - self.origin[0]) / self.resolution)
        j = math.floor((p[1] - self.origin[1]) / self.resolution)
        return i, j

    def cell_to_world(self, c) -> Tuple[float, float]:
        return (self.origin[0] + (c[0] + 0.5) * self.resolution,
                self.origin[1] + (c[1] + 0.5) * self.resolution)

    def cell_in_bounds(self, c) -> bool:
        return 0 <= c[0] < self.width and 0 <= c[1] < self.height

    def in_bounds(self, p) -> bool:
        return self.cell_in_bounds(self.world_to_cell(p))

    def state_at(self, p) -> CellState:
        c = self.world_to_cell(p)
        if not self.cell_in_bounds(c):
            raise OutOfBounds(f"point ({p[0]:.3f}, {p[1]:.3f}) outside grid")
        return CellState(int(self.cells[c[1], c[0]]))

    def free_cells(self) -> np.ndarray:
        """Flat indices (row-major) of every Free cell."""
        return np.flatnonzero(self.cells == CellState.FREE)

    def count(self, state: CellState) -> int:
        return int(np.count_nonzero(self.cells == state))


@dataclass(frozen=True)
class RangeScan:
    pose: Tuple[float, float, float]
    angles: Sequence[float]
    ranges: Sequence[float]
    max_range: float

    def __post_init__(self):
        if len(self.angles) != len(self.ranges):
            raise ValueError(f"{len(self.angles)} angles but {len(self.ranges)} ranges")
        if not self.max_range > 0:
            raise ValueError(f"max_range must be > 0, got {self.max_range}")


# ------------------------------------------------------------
# Rasterization
# ------------------------------------------------------------

def supercover_cells(grid: OccupancyGrid, a, b) -> List[Tuple[int, int]]:
    """
    Every cell whose closed square touches segment ab, clipped to the grid.

    Column sweep in cell units: for each touched column the segment's y-extent over
    that column gives the touched rows.
    """
    res = grid.resolution
    x0 = (a[0] - grid.origin[0]) / res
    y0 = (a[1] - grid.origin[1]) / res
    x1 = (b[0] - grid.origin[0]) / res
    y1 = (b[1] - grid.origin[1]) / res

    if x1 < x0:
        x0, y0, x1, y1 = x1, y1, x0, y0

    cells = []
    i_lo = max(math.ceil(x0) - 1, 0)
    i_hi = min(math.floor(x1), grid.width - 1)
    dx = x1 - x0
    for i in range(i_lo, i_hi + 1):
        if dx > 0:
            xa = max(float(i), x0)
            xb = min(float(i + 1), x1)
            ya = y0 + (y1 - y0) * (xa - x0) / dx
            yb = y0 + (y1 - y0) * (xb - x0) / dx
        else:
            ya, yb = y0, y1
        lo, hi = min(ya, yb), max(ya, yb)
        j_lo = max(math.ceil(lo) - 1, 0)
        j_hi = min(math.floor(hi), grid.height - 1)
        for j in range(j_lo, j_hi + 1):
            cells.append((i, j))
    return cells


# ------------------------------------------------------------
# Operations
# ------------------------------------------------------------

def integrate_scan(grid: OccupancyGrid, scan: RangeScan) -> OccupancyGrid:
    """
    Fuse a range scan: cells along each beam become Free, hit cells Occupied.

    All free marks of the scan are applied before its occupied marks, so the
    result depends only on the scan and integrating it twice changes nothing.
    """
    x, y, theta = scan.pose
    if not grid.in_bounds((x, y)):
        raise OutOfBounds(f"scan pose ({x:.3f}, {y:.3f}) outside grid")

    free_marks = []
    hit_marks = []
    for angle, rng in zip(scan.angles, scan.ranges):
        if not np.isfinite(rng) or rng <= 0:
            continue
        hit = rng < scan.max_range
        reach = min(rng, scan.max_range)
        end = (x + reach * math.cos(theta + angle), y + reach * math.sin(theta + angle))
        ray = supercover_cells(grid, (x, y), end)
        if hit:
            hit_cell = grid.world_to_cell(end)
            free_marks.extend(c for c in ray if c != hit_cell)
            if grid.cell_in_bounds(hit_cell):
                hit_marks.append(hit_cell)
        else:
            free_marks.extend(ray)

    cells = grid.cells.copy()
    if free_marks:
        ii, jj = zip(*free_marks)
        cells[np.array(jj), np.array(ii)] = CellState.FREE
    if hit_marks:
        ii, jj = zip(*hit_marks)
        cells[np.array(jj), np.array(ii)] = CellState.OCCUPIED
    return replace(grid, cells=cells)


def inflate(grid: OccupancyGrid, radius: Optional[float] = None) -> OccupancyGrid:
    """Mark every cell whose center lies within radius of an Occupied cell center."""
    r = grid.inflation_radius if radius is None else radius
    if r < 0:
        raise ValueError(f"inflation radius must be >= 0, got {r}")
    occupied = grid.cells == CellState.OCCUPIED
    if r == 0 or not occupied.any():
        return replace(grid, cells=grid.cells.copy(), inflation_radius=r)
    dist = distance_transform_edt(~occupied, sampling=grid.resolution)
    cells = grid.cells.copy()
    cells[dist <= r + 1e-9] = CellState.OCCUPIED
    return replace(grid, cells=cells, inflation_radius=r)


def is_free(grid: OccupancyGrid, p) -> bool:
    c = grid.world_to_cell(p)
    return grid.cell_in_bounds(c) and grid.cells[c[1], c[0]] == CellState.FREE


def segment_free(grid: OccupancyGrid, a, b) -> bool:
    """True iff every cell touched by segment ab is Free; Unknown counts as blocked."""
    if not grid.in_bounds(a):
        raise OutOfBounds(f"segment endpoint ({a[0]:.3f}, {a[1]:.3f}) outside grid")
    if not grid.in_bounds(b):
        raise OutOfBounds(f"segment endpoint ({b[0]:.3f}, {b[1]:.3f}) outside grid")
    cells = grid.cells
    for i, j in supercover_cells(grid, a, b):
        if cells[j, i] != CellState.FREE:
            return False
    return True


def sample_free(grid: OccupancyGrid, rng: np.random.Generator,
                free_cells: Optional[np.ndarray] = None) -> np.ndarray:
    """Uniform cell among the Free cells, then uniform within that cell."""
    if free_cells is None:
        free_cells = grid.free_cells()
    if len(free_cells) == 0:
        raise EmptyFreeSpace("grid has no Free cell to sample")
    flat = free_cells[rng.integers(len(free_cells))]
    j, i = divmod(int(flat), grid.width)
    u = rng.random(2)
    return np.array([
        grid.origin[0] + (i + u[0]) * grid.resolution,
        grid.origin[1] + (j + u[1]) * grid.resolution,
    ])


def add_box(grid: OccupancyGrid, lo, hi, state: CellState = CellState.OCCUPIED) -> OccupancyGrid:
    """Set every cell whose center lies in the axis-aligned box [lo, hi] (world m)."""
    xs = grid.origin[0] + (np.arange(grid.width) + 0.5) * grid.resolution
    ys = grid.origin[1] + (np.arange(grid.height) + 0.5) * grid.resolution
    cols = (xs >= lo[0]) & (xs <= hi[0])
    rows = (ys >= lo[1]) & (ys <= hi[1])
    cells = grid.cells.copy()
    cells[np.ix_(rows, cols)] = state
    return replace(grid, cells=cells)


# ------------------------------------------------------------
# Map file I/O
# ------------------------------------------------------------

def format_map(grid: OccupancyGrid) -> str:
    """Header of key=value lines, then rows top (highest y) to bottom."""
    header = {
        "resolution": repr(float(grid.resolution)),
        "origin_x": repr(float(grid.origin[0])),
        "origin_y": repr(float(grid.origin[1])),
        "width": str(grid.width),
        "height": str(grid.height),
        "inflation_radius": repr(float(grid.inflation_radius)),
    }
    lines = [f"{k}={header[k]}" for k in MAP_HEADER_KEYS]
    for j in range(grid.height - 1, -1, -1):
        lines.append("".join(CELL_CHARS[int(s)] for s in grid.cells[j]))
    return "\n".join(lines) + "\n"


def parse_map(text: str) -> OccupancyGrid:
    lines = text.splitlines()
    values = {}
    for n, key in enumerate(MAP_HEADER_KEYS, start=1):
        if n > len(lines):
            raise MapFormatError(n, key, "missing header line")
        name, sep, raw = lines[n - 1].partition("=")
        if not sep or name.strip() != key:
            raise MapFormatError(n, key, f"expected '{key}=<value>', got {lines[n - 1]!r}")
        try:
            values[key] = int(raw) if key in ("width", "height") else float(raw)
        except ValueError:
            raise MapFormatError(n, key, f"not a number: {raw!r}") from None

    width, height = values["width"], values["height"]
    if width <= 0 or height <= 0:
        raise MapFormatError(4, "width", f"grid size must be positive, got {width}x{height}")
    body = lines[len(MAP_HEADER_KEYS):]
    if len(body) != height:
        raise MapFormatError(len(MAP_HEADER_KEYS) + 1, "rows", f"expected {height} rows, got {len(body)}")

    cells = np.empty((height, width), dtype=np.int8)
    for k, row in enumerate(body):
        line_no = len(MAP_HEADER_KEYS) + 1 + k
        if len(row) != width:
            raise MapFormatError(line_no, "rows", f"expected {width} characters, got {len(row)}")
        try:
            cells[height - 1 - k] = [CHAR_CELLS[ch] for ch in row]
        except KeyError as exc:
            raise MapFormatError(line_no, "rows", f"unknown cell character {exc.args[0]!r}") from None

    try:
        return OccupancyGrid(values["resolution"], (values["origin_x"], values["origin_y"]),
                             width, height, cells, values["inflation_radius"])
    except ValueError as exc:
        raise MapFormatError(1, "resolution", str(exc)) from None


def load_map(path) -> OccupancyGrid:
    with open(path, "r") as f:
        return parse_map(f.read())


def save_map(grid: OccupancyGrid, path) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(format_map(grid))
