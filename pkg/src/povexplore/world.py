"""Ground-truth grid world: generation, POV geometry, movement and sensing.

Coordinates are (x, y) with x growing rightward and y downward, so ``Up``
decreases y. Arrays are indexed ``[y, x]``.

A cell can be looked at from nine points of view: from itself or from any of
its eight neighbours. The POV index of a viewer at offset (dx, dy) from the
cell is ``3 * (dy + 1) + (dx + 1)``, so index 4 is the cell itself. Standing at
``p`` and sensing the 3x3 block around it observes every block cell ``c`` from
``pov_of(c, p)``.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .errors import ConfigError, MovementError

Pos = Tuple[int, int]

NUM_POVS = 9
DEFAULT_COUNT_PRIOR = (0.5, 0.3, 0.15, 0.05)


class Action(enum.IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3


ACTIONS = tuple(Action)
ACTION_DELTAS = {
    Action.UP: (0, -1),
    Action.DOWN: (0, 1),
    Action.LEFT: (-1, 0),
    Action.RIGHT: (1, 0),
}


@dataclass(frozen=True)
class WorldConfig:
    width: int = 20
    height: int = 20
    t_max: int = 3
    p_vis: float = 0.5
    count_prior: Tuple[float, ...] = DEFAULT_COUNT_PRIOR
    max_steps: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "count_prior", tuple(float(p) for p in self.count_prior))
        self.validate()

    def validate(self):
        if int(self.width) != self.width or self.width < 3:
            raise ConfigError(f"width: must be an integer >= 3, got {self.width!r}")
        if int(self.height) != self.height or self.height < 3:
            raise ConfigError(f"height: must be an integer >= 3, got {self.height!r}")
        if int(self.t_max) != self.t_max or self.t_max < 0:
            raise ConfigError(f"t_max: must be a non-negative integer, got {self.t_max!r}")
        if not (0.0 < self.p_vis <= 1.0):
            raise ConfigError(f"p_vis: must lie in (0, 1], got {self.p_vis!r}")
        if len(self.count_prior) != self.t_max + 1:
            raise ConfigError(
                f"count_prior: expected {self.t_max + 1} entries for t_max={self.t_max}, "
                f"got {len(self.count_prior)}"
            )
        if any(p < 0 for p in self.count_prior):
            raise ConfigError("count_prior: entries must be non-negative")
        if abs(sum(self.count_prior) - 1.0) > 1e-12:
            raise ConfigError(f"count_prior: must sum to 1, sums to {sum(self.count_prior)!r}")
        if int(self.max_steps) != self.max_steps or self.max_steps < 0:
            raise ConfigError(f"max_steps: must be a non-negative integer, got {self.max_steps!r}")

    @property
    def num_cells(self) -> int:
        return self.width * self.height

    def in_bounds(self, pos: Pos) -> bool:
        x, y = pos
        return 0 <= x < self.width and 0 <= y < self.height


@dataclass(frozen=True)
class CellTruth:
    count: int
    visibility: Tuple[int, ...]  # one 9-bit POV mask per target, bit k = visible from POV k

    def visible_from(self, pov: int) -> int:
        return sum((mask >> pov) & 1 for mask in self.visibility)


@dataclass(frozen=True)
class Observation:
    cell: Pos
    pov: int
    n: int


@dataclass
class GridWorld:
    """Hidden target layout plus the agent position.

    ``counts[y, x]`` is the number of targets in a cell and
    ``visibility[y, x, k, pov]`` whether target slot ``k`` is seen from ``pov``
    (slots at or beyond the cell's count are always False).
    """

    config: WorldConfig
    counts: np.ndarray
    visibility: np.ndarray
    agent_pos: Pos
    visible_counts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.visible_counts = self.visibility.sum(axis=2).astype(np.int64)

    def cell(self, pos: Pos) -> CellTruth:
        x, y = pos
        count = int(self.counts[y, x])
        masks = []
        for k in range(count):
            bits = self.visibility[y, x, k]
            masks.append(int(sum(1 << p for p in range(NUM_POVS) if bits[p])))
        return CellTruth(count, tuple(masks))

    def dump(self) -> str:
        """Text dump: one line per cell, ``x y count mask mask ...`` with 9-bit masks."""
        lines = [f"# world {self.config.width}x{self.config.height} agent {self.agent_pos[0]} {self.agent_pos[1]}"]
        for y in range(self.config.height):
            for x in range(self.config.width):
                c = self.cell((x, y))
                masks = " ".join(format(m, "09b") for m in c.visibility)
                lines.append(f"{x} {y} {c.count} {masks}".rstrip())
        return "\n".join(lines) + "\n"


def generate_world(config: WorldConfig, seed: int) -> GridWorld:
    config.validate()
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    shape = (config.height, config.width)
    counts = rng.choice(config.t_max + 1, size=shape, p=np.asarray(config.count_prior))
    bits = rng.random(shape + (config.t_max, NUM_POVS)) < config.p_vis
    slots = np.arange(config.t_max)[None, None, :, None]
    visibility = bits & (slots < counts[:, :, None, None])
    start = (config.width // 2, config.height // 2)
    return GridWorld(config, counts.astype(np.int64), visibility, start)


def pov_of(cell: Pos, viewer: Pos) -> int:
    dx = viewer[0] - cell[0]
    dy = viewer[1] - cell[1]
    if abs(dx) > 1 or abs(dy) > 1:
        raise ValueError(f"viewer {viewer} is not adjacent to cell {cell}")
    return 3 * (dy + 1) + (dx + 1)


def pov_offset(pov: int) -> Pos:
    """Inverse of the POV encoding: viewer offset (dx, dy) relative to the cell."""
    if not 0 <= pov < NUM_POVS:
        raise ValueError(f"POV index out of range: {pov}")
    return pov % 3 - 1, pov // 3 - 1


def admissible_actions(pos: Pos, config: WorldConfig) -> List[Action]:
    """Actions keeping the agent on the grid, in canonical order."""
    x, y = pos
    return [a for a in ACTIONS if config.in_bounds((x + ACTION_DELTAS[a][0], y + ACTION_DELTAS[a][1]))]


def admissible_mask(pos: Pos, config: WorldConfig) -> np.ndarray:
    mask = np.zeros(len(ACTIONS), dtype=bool)
    for a in admissible_actions(pos, config):
        mask[a] = True
    return mask


def apply_action(pos: Pos, action: Action, config: WorldConfig) -> Pos:
    dx, dy = ACTION_DELTAS[Action(action)]
    new = (pos[0] + dx, pos[1] + dy)
    if not config.in_bounds(new):
        raise MovementError(f"{Action(action).name} from {pos} leaves the {config.width}x{config.height} grid")
    return new


def window_cells(pos: Pos, config: WorldConfig) -> List[Pos]:
    """In-bounds cells of the 3x3 block centred on ``pos``, row-major."""
    x, y = pos
    return [
        (x + dx, y + dy)
        for dy in (-1, 0, 1)
        for dx in (-1, 0, 1)
        if config.in_bounds((x + dx, y + dy))
    ]


@functools.lru_cache(maxsize=None)
def observable_povs(width: int, height: int) -> np.ndarray:
    """``[y, x, pov]`` is True when that POV's viewer position is on the grid.

    POVs of edge cells whose viewer would stand off the grid can never be
    observed. The returned array is read-only.
    """
    ys, xs = np.mgrid[0:height, 0:width]
    out = np.zeros((height, width, NUM_POVS), dtype=bool)
    for pov in range(NUM_POVS):
        dx, dy = pov_offset(pov)
        vx, vy = xs + dx, ys + dy
        out[:, :, pov] = (vx >= 0) & (vx < width) & (vy >= 0) & (vy < height)
    out.flags.writeable = False
    return out


def sense(world: GridWorld, pos: Pos) -> List[Observation]:
    if not world.config.in_bounds(pos):
        raise ValueError(f"position {pos} is off the grid")
    out = []
    for c in window_cells(pos, world.config):
        pov = pov_of(c, pos)
        out.append(Observation(c, pov, int(world.visible_counts[c[1], c[0], pov])))
    return out


def true_target_map(world: GridWorld) -> np.ndarray:
    return world.counts.copy()

