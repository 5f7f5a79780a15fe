"""Grid-constrained road network MDP: cells, the 9-direction action set, transitions, features."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy import ndimage


class Action(IntEnum):
    F = 0
    FL = 1
    L = 2
    BL = 3
    B = 4
    BR = 5
    R = 6
    FR = 7
    ST = 8


# (d_row, d_col); F is north (decreasing row), R is east (increasing column)
OFFSETS = np.array(
    [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (0, 0)],
    dtype=np.int64,
)
N_ACTIONS = len(Action)
OPPOSITE = {
    Action.F: Action.B, Action.B: Action.F,
    Action.L: Action.R, Action.R: Action.L,
    Action.FL: Action.BR, Action.BR: Action.FL,
    Action.FR: Action.BL, Action.BL: Action.FR,
    Action.ST: Action.ST,
}
_OFFSET_TO_ACTION = {tuple(o): Action(i) for i, o in enumerate(OFFSETS.tolist())}


class WorldError(ValueError):
    pass


def action_for_offset(d_row: int, d_col: int) -> Action:
    try:
        return _OFFSET_TO_ACTION[(int(d_row), int(d_col))]
    except KeyError:
        raise WorldError(f"cells are not adjacent: offset ({d_row}, {d_col})") from None


@dataclass(frozen=True, eq=False)
class World:
    """Immutable grid world.

    States are numbered over passable cells in row-major order. ``next_state[s, a]``
    is the successor state or -1 when the move is off-grid or into a blocked cell.
    """

    rows: int
    cols: int
    passable: np.ndarray            # (rows, cols) bool
    features: np.ndarray            # (n_states, d), one row per passable cell
    cell_size: float = 100.0
    origin_lonlat: tuple[float, float] | None = None   # north-west corner
    cells: np.ndarray = field(init=False, repr=False)   # (n_states, 2) row/col
    state_index: np.ndarray = field(init=False, repr=False)  # (rows, cols), -1 if blocked
    next_state: np.ndarray = field(init=False, repr=False)
    valid: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        passable = np.array(self.passable, dtype=bool)
        cells = np.argwhere(passable)
        index = np.full(passable.shape, -1, dtype=np.int64)
        index[cells[:, 0], cells[:, 1]] = np.arange(len(cells))
        target = cells[:, None, :] + OFFSETS[None, :, :]
        inside = ((target[..., 0] >= 0) & (target[..., 0] < self.rows)
                  & (target[..., 1] >= 0) & (target[..., 1] < self.cols))
        nxt = np.full((len(cells), N_ACTIONS), -1, dtype=np.int64)
        tr = np.where(inside, target[..., 0], 0)
        tc = np.where(inside, target[..., 1], 0)
        nxt[inside] = index[tr, tc][inside]
        for name, value in (("passable", passable), ("cells", cells), ("state_index", index),
                            ("next_state", nxt), ("valid", nxt >= 0),
                            ("features", np.array(self.features, dtype=np.float64))):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n_states(self) -> int:
        return len(self.cells)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def state_of(self, row: int, col: int) -> int:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise WorldError(f"cell ({row}, {col}) is out of bounds")
        s = int(self.state_index[row, col])
        if s < 0:
            raise WorldError(f"cell ({row}, {col}) is blocked")
        return s

    def cell_of(self, state: int) -> tuple[int, int]:
        r, c = self.cells[state]
        return int(r), int(c)

    def cell_id(self, state: int) -> int:
        """Row-major index of the cell over the full grid."""
        r, c = self.cells[state]
        return int(r) * self.cols + int(c)

    def centers(self) -> np.ndarray:
        """Cell centers in local meters, x east and y south of the north-west corner."""
        return (self.cells[:, ::-1] + 0.5) * self.cell_size

    def move_lengths(self) -> np.ndarray:
        """Geometric length of each action in meters (0 for ST)."""
        return np.hypot(OFFSETS[:, 0], OFFSETS[:, 1]) * self.cell_size

    def to_dict(self) -> dict:
        blocked = np.argwhere(~self.passable).tolist()
        return {
            "format": "velopref.world/1",
            "rows": self.rows,
            "cols": self.cols,
            "cell_size": self.cell_size,
            "origin_lonlat": list(self.origin_lonlat) if self.origin_lonlat else None,
            "blocked": blocked,
            "features": self.features.tolist(),
        }


def build_world(rows: int, cols: int, blocked, features, cell_size: float = 100.0,
                origin_lonlat=None) -> World:
    """Build a world from blocked cells and a feature table ordered row-major over passable cells."""
    if rows < 1 or cols < 1:
        raise WorldError("rows and cols must be positive")
    passable = np.ones((rows, cols), dtype=bool)
    for r, c in blocked:
        if not (0 <= r < rows and 0 <= c < cols):
            raise WorldError(f"blocked cell ({r}, {c}) is out of bounds")
        passable[r, c] = False
    n = int(passable.sum())
    if n == 0:
        raise WorldError("world has zero passable cells")
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != n:
        raise WorldError(f"feature table must have one row per passable cell ({n}), got shape {features.shape}")
    if not np.all(np.isfinite(features)) or features.min() < 0.0 or features.max() > 1.0:
        raise WorldError("feature values must lie in [0, 1]")
    return World(rows, cols, passable, features, float(cell_size),
                 tuple(origin_lonlat) if origin_lonlat is not None else None)


def world_from_dict(doc: dict) -> World:
    return build_world(doc["rows"], doc["cols"], [tuple(b) for b in doc.get("blocked", [])],
                       doc["features"], doc.get("cell_size", 100.0), doc.get("origin_lonlat"))


def save_world(world: World, path) -> None:
    Path(path).write_text(json.dumps(world.to_dict(), separators=(",", ":")))


def load_world(path) -> World:
    return world_from_dict(json.loads(Path(path).read_text()))


def local_actions(world: World, state: int) -> set[Action]:
    if not 0 <= state < world.n_states:
        raise WorldError(f"state {state} is not a passable cell of this world")
    return {Action(a) for a in np.flatnonzero(world.valid[state])}


def step(world: World, state: int, action: Action) -> int:
    if not 0 <= state < world.n_states:
        raise WorldError(f"state {state} is not a passable cell of this world")
    nxt = int(world.next_state[state, int(action)])
    if nxt < 0:
        raise WorldError(f"action {Action(action).name} is invalid at cell {world.cell_of(state)}")
    return nxt


def normalize_features(raw) -> np.ndarray:
    """Per-column min-max scaling to [0, 1]; constant columns map to 0."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise WorldError("feature table contains non-finite values")
    lo = raw.min(axis=0)
    span = raw.max(axis=0) - lo
    out = np.zeros_like(raw)
    ok = span > 0
    out[:, ok] = (raw[:, ok] - lo[ok]) / span[ok]
    return np.clip(out, 0.0, 1.0)


@dataclass
class SynthConfig:
    rows: int = 20
    cols: int = 20
    blocked_fraction: float = 0.15
    feature_dim: int = 8
    planted_weights: list[float] | None = None   # default: one-hot on feature 0
    seed: int = 0
    smoothing: float = 2.0      # gaussian correlation length of feature fields, in cells
    cell_size: float = 100.0
    max_retries: int = 100


def _connected(passable: np.ndarray) -> bool:
    _, n = ndimage.label(passable, structure=np.ones((3, 3), dtype=int))
    return n == 1


def generate_synthetic_world(config: SynthConfig) -> tuple[World, np.ndarray]:
    """Random connected world with spatially smooth features and a planted linear reward.

    Returns the world and the planted reward per state (min-max normalized; constant -> 0).
    """
    if not 0.0 <= config.blocked_fraction < 1.0:
        raise WorldError("blocked_fraction must lie in [0, 1)")
    weights = config.planted_weights
    if weights is None:
        weights = np.eye(config.feature_dim)[0]
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (config.feature_dim,):
        raise WorldError(f"planted_weights must have length {config.feature_dim}")

    rng = np.random.default_rng(config.seed)
    shape = (config.rows, config.cols)
    n_blocked = int(round(config.blocked_fraction * config.rows * config.cols))
    for _ in range(config.max_retries):
        passable = np.ones(shape, dtype=bool)
        if n_blocked:
            flat = rng.choice(passable.size, size=n_blocked, replace=False)
            passable.flat[flat] = False
        if passable.any() and _connected(passable):
            break
    else:
        raise WorldError(f"could not generate a connected world in {config.max_retries} attempts")

    fields = rng.standard_normal((config.feature_dim, *shape))
    if config.smoothing > 0:
        fields = np.stack([ndimage.gaussian_filter(f, config.smoothing, mode="reflect") for f in fields])
    raw = fields[:, passable].T
    features = normalize_features(raw)
    world = World(config.rows, config.cols, passable, features, float(config.cell_size))
    planted = normalize_features((features @ weights)[:, None])[:, 0]
    return world, planted
