"""Discrete navigation world: navigability grid, metric distances and the 8-direction motion model."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

Cell = Tuple[int, int]

#: meters per cell edge; makes d_meas = 2 cells and the local-GP radius 5 cells
DEFAULT_CELL_SIZE = 290.0
STEP_CELLS = 2
NULL_ACTION = -1


class Action(IntEnum):
    S = 0
    SE = 1
    E = 2
    NE = 3
    N = 4
    NW = 5
    W = 6
    SW = 7


# (drow, dcol) unit displacement per action; rows grow southwards.
DIRECTIONS = np.array(
    [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)], dtype=int
)
N_ACTIONS = len(DIRECTIONS)


def reverse(action: int) -> int:
    return (int(action) + 4) % N_ACTIONS


class MapFormatError(ValueError):
    """Raised when a map file cannot be parsed; carries the offending line number."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True, eq=False)
class NavMap:
    navigable: np.ndarray
    cell_size: float = DEFAULT_CELL_SIZE
    zones: Tuple[Tuple[Cell, ...], ...] = field(default_factory=tuple)

    def __post_init__(self):
        nav = np.array(self.navigable, dtype=bool)
        if nav.ndim != 2 or nav.shape[0] == 0 or nav.shape[1] == 0:
            raise ValueError("navigable mask must be a non-empty 2-D array")
        if not nav.any():
            raise ValueError("map has no navigable cell")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        nav.setflags(write=False)
        object.__setattr__(self, "navigable", nav)
        zones = tuple(tuple((int(r), int(c)) for r, c in z) for z in self.zones)
        for k, zone in enumerate(zones):
            if not zone:
                raise ValueError(f"zone {k} is empty")
            for cell in zone:
                if not self.is_navigable(cell):
                    raise ValueError(f"zone cell not navigable: {cell}")
        object.__setattr__(self, "zones", zones)
        cells = np.argwhere(nav)
        cells.setflags(write=False)
        object.__setattr__(self, "_cells", cells)
        index = np.full(nav.shape, -1, dtype=int)
        index[nav] = np.arange(len(cells))
        index.setflags(write=False)
        object.__setattr__(self, "_index", index)

    @property
    def height(self) -> int:
        return self.navigable.shape[0]

    @property
    def width(self) -> int:
        return self.navigable.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.navigable.shape

    @property
    def cells(self) -> np.ndarray:
        """Navigable cells as an ``(n, 2)`` array in row-major order."""
        return self._cells

    @property
    def n_navigable(self) -> int:
        return len(self._cells)

    def index_of(self, cell: Sequence[int]) -> int:
        """Position of ``cell`` in :attr:`cells`, or -1 for land."""
        if not self.in_bounds(cell):
            return -1
        return int(self._index[cell[0], cell[1]])

    def to_grid(self, values: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Scatter a per-navigable-cell vector onto the full grid."""
        grid = np.full(self.shape, fill, dtype=float)
        grid[self.navigable] = values
        return grid

    def in_bounds(self, cell: Sequence[int]) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width

    def is_navigable(self, cell: Sequence[int]) -> bool:
        return self.in_bounds(cell) and bool(self.navigable[cell[0], cell[1]])

    def meters_to_cells(self, meters: float) -> float:
        return meters / self.cell_size


def apply_action(navmap: NavMap, cell: Sequence[int], action: int) -> Optional[Cell]:
    """Move two cells in ``action``'s direction.

    Returns ``None`` when the target or the intermediate cell is land or out of bounds.
    """
    if action == NULL_ACTION:
        return (int(cell[0]), int(cell[1]))
    dr, dc = DIRECTIONS[action]
    mid = (cell[0] + dr, cell[1] + dc)
    target = (int(cell[0] + STEP_CELLS * dr), int(cell[1] + STEP_CELLS * dc))
    if navmap.is_navigable(mid) and navmap.is_navigable(target):
        return target
    return None


def feasible_actions(navmap: NavMap, cell: Sequence[int]) -> list:
    return [a for a in range(N_ACTIONS) if apply_action(navmap, cell, a) is not None]


def distance_m(navmap: NavMap, a: Sequence[int], b: Sequence[int]) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1])) * navmap.cell_size


def disk_mask(navmap: NavMap, center: Sequence[int], radius: float) -> np.ndarray:
    """Boolean grid of navigable cells within ``radius`` meters of ``center``."""
    rows, cols = np.indices(navmap.shape)
    d = np.hypot(rows - center[0], cols - center[1]) * navmap.cell_size
    return (d <= radius) & navmap.navigable


def disk(navmap: NavMap, center: Sequence[int], radius: float) -> set:
    return {(int(r), int(c)) for r, c in np.argwhere(disk_mask(navmap, center, radius))}


# ---------------------------------------------------------------------------
# map file format


def load_map(text: str) -> NavMap:
    """Parse the ``MAP``/``ZONE`` text format."""
    lines = text.splitlines()
    if not lines:
        raise MapFormatError(1, "empty map file")
    header = lines[0].split()
    if len(header) != 4 or header[0] != "MAP":
        raise MapFormatError(1, "malformed header, expected 'MAP <height> <width> <cell_size_m>'")
    try:
        height, width = int(header[1]), int(header[2])
        cell_size = float(header[3])
    except ValueError:
        raise MapFormatError(1, "malformed header values") from None
    if height <= 0 or width <= 0 or not cell_size > 0:
        raise MapFormatError(1, "map dimensions and cell size must be positive")
    if len(lines) < 1 + height:
        raise MapFormatError(len(lines) + 1, f"expected {height} grid rows")

    grid = np.zeros((height, width), dtype=bool)
    for i in range(height):
        lineno = i + 2
        tokens = lines[1 + i].split()
        if len(tokens) != width:
            raise MapFormatError(lineno, f"ragged row: expected {width} tokens, got {len(tokens)}")
        for j, tok in enumerate(tokens):
            if tok not in ("0", "1"):
                raise MapFormatError(lineno, f"invalid grid token {tok!r}")
            grid[i, j] = tok == "1"
    if not grid.any():
        raise MapFormatError(2, "map has no navigable cell")

    zones = {}
    for k, line in enumerate(lines[1 + height:]):
        lineno = height + 2 + k
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] != "ZONE" or len(tokens) < 4 or len(tokens) % 2 != 0:
            raise MapFormatError(lineno, "malformed zone line, expected 'ZONE <id> <row> <col> ...'")
        try:
            zid = int(tokens[1])
            coords = [int(t) for t in tokens[2:]]
        except ValueError:
            raise MapFormatError(lineno, "zone values must be integers") from None
        cells = list(zip(coords[0::2], coords[1::2]))
        for r, c in cells:
            if not (0 <= r < height and 0 <= c < width) or not grid[r, c]:
                raise MapFormatError(lineno, f"zone cell not navigable: ({r}, {c})")
        zones.setdefault(zid, []).extend(cells)
    return NavMap(grid, cell_size, tuple(tuple(zones[z]) for z in sorted(zones)))


def dump_map(navmap: NavMap) -> str:
    out = [f"MAP {navmap.height} {navmap.width} {navmap.cell_size:g}"]
    out.extend(" ".join("1" if v else "0" for v in row) for row in navmap.navigable)
    for k, zone in enumerate(navmap.zones, start=1):
        out.append(f"ZONE {k} " + " ".join(f"{r} {c}" for r, c in zone))
    return "\n".join(out) + "\n"


def read_map(path) -> NavMap:
    return load_map(Path(path).read_text(encoding="utf-8"))


def default_map() -> NavMap:
    """The bundled 58x38 synthetic lake with three deployment zones."""
    text = resources.files("ipp_fleet").joinpath("data/lake.map").read_text(encoding="utf-8")
    return load_map(text)


def open_water(height: int, width: int, cell_size: float = DEFAULT_CELL_SIZE,
               zones: Iterable = ()) -> NavMap:
    return NavMap(np.ones((height, width), dtype=bool), cell_size, tuple(zones))
