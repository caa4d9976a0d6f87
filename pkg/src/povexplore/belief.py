"""Exact per-cell Bayesian belief over target counts.

Given a count ``t``, the number of targets seen from one POV is
Binomial(t, p_vis), independently across POVs, so each cell's posterior is
just the prior multiplied by one Binomial likelihood per distinct (cell, POV)
pair observed. Repeating a (cell, POV) observation in the noiseless model
returns the same count and carries no information, which is what the POV
mask records.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .errors import InconsistencyError
from .world import (
    NUM_POVS,
    Action,
    Observation,
    Pos,
    WorldConfig,
    admissible_actions,
    apply_action,
    pov_of,
)


def likelihood(n: int, t: int, p_vis: float) -> float:
    """P(n targets visible from one POV | t targets in the cell)."""
    if not (0.0 < p_vis <= 1.0):
        raise ValueError(f"p_vis must lie in (0, 1], got {p_vis!r}")
    if n < 0 or t < 0:
        raise ValueError("counts must be non-negative")
    if n > t:
        return 0.0
    return math.comb(t, n) * p_vis**n * (1.0 - p_vis) ** (t - n)


@lru_cache(maxsize=64)
def _likelihood_table(t_max: int, p_vis: float) -> np.ndarray:
    table = np.array(
        [[likelihood(n, t, p_vis) for t in range(t_max + 1)] for n in range(t_max + 1)]
    )
    table.setflags(write=False)
    return table


def likelihood_table(t_max: int, p_vis: float) -> np.ndarray:
    """``L[n, t]`` for n, t in 0..t_max (read-only)."""
    return _likelihood_table(int(t_max), float(p_vis))


def entropy_bits(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy in bits along the last axis, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    return -np.sum(np.where(p > 0, p * np.log2(safe), 0.0), axis=-1)


def cell_entropy(probs: Sequence[float]) -> float:
    return float(entropy_bits(np.asarray(probs, dtype=np.float64)))


@dataclass
class BeliefState:
    """Per-cell categorical posteriors, the observed-POV mask and an entropy cache.

    ``probs`` has shape (height, width, t_max + 1), ``mask`` (height, width, 9)
    and ``entropy_map`` (height, width).
    """

    probs: np.ndarray
    mask: np.ndarray
    entropy_map: np.ndarray

    @classmethod
    def from_prior(cls, width: int, height: int, prior: Sequence[float]) -> "BeliefState":
        prior = np.asarray(prior, dtype=np.float64)
        probs = np.broadcast_to(prior, (height, width, prior.size)).copy()
        mask = np.zeros((height, width, NUM_POVS), dtype=bool)
        return cls(probs, mask, entropy_bits(probs))

    @property
    def width(self) -> int:
        return self.probs.shape[1]

    @property
    def height(self) -> int:
        return self.probs.shape[0]

    @property
    def t_max(self) -> int:
        return self.probs.shape[2] - 1

    def in_bounds(self, pos: Pos) -> bool:
        return 0 <= pos[0] < self.width and 0 <= pos[1] < self.height

    def copy(self) -> "BeliefState":
        return BeliefState(self.probs.copy(), self.mask.copy(), self.entropy_map.copy())

    def unique_povs_observed(self) -> int:
        return int(self.mask.sum())

    def dump(self) -> str:
        """Text snapshot: ``x y p0 .. pT entropy mask9`` per cell."""
        lines = [f"# belief {self.width}x{self.height} t_max {self.t_max}"]
        for y in range(self.height):
            for x in range(self.width):
                probs = " ".join(repr(float(v)) for v in self.probs[y, x])
                bits = "".join("1" if b else "0" for b in self.mask[y, x])
                lines.append(f"{x} {y} {probs} {float(self.entropy_map[y, x])!r} {bits}")
        return "\n".join(lines) + "\n"


def init_belief(config: WorldConfig) -> BeliefState:
    return BeliefState.from_prior(config.width, config.height, config.count_prior)


def update(belief: BeliefState, observations: Iterable[Observation], p_vis: float) -> BeliefState:
    """Return the posterior after ``observations``; ``belief`` is left untouched.

    Observations of an already-masked (cell, POV) pair are skipped, as are
    duplicates within the call.
    """
    fresh = {}
    for ob in observations:
        x, y = ob.cell
        if not belief.mask[y, x, ob.pov]:
            fresh.setdefault((y, x, ob.pov), ob.n)
    if not fresh:
        return belief.copy()

    table = likelihood_table(belief.t_max, p_vis)
    out = belief.copy()
    touched = set()
    for (y, x, pov), n in sorted(fresh.items()):
        if n > belief.t_max:
            raise InconsistencyError(f"observed {n} targets at {(x, y)} but t_max is {belief.t_max}")
        out.probs[y, x] *= table[n]
        out.mask[y, x, pov] = True
        touched.add((y, x))
    for y, x in sorted(touched):
        z = out.probs[y, x].sum()
        if not z > 0:
            raise InconsistencyError(f"observations at {(x, y)} are impossible under the belief")
        out.probs[y, x] /= z
        out.entropy_map[y, x] = entropy_bits(out.probs[y, x])
    return out


def total_entropy(belief: BeliefState) -> float:
    return float(np.sum(belief.entropy_map))


def entropy_drop(before: BeliefState, after: BeliefState) -> float:
    return total_entropy(before) - total_entropy(after)


def mutual_information(probs: np.ndarray, p_vis: float) -> np.ndarray:
    """I(count; visible count from one fresh POV) in bits, for each row of ``probs``."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    table = likelihood_table(probs.shape[1] - 1, p_vis)
    joint = probs[:, None, :] * table[None, :, :]  # [cell, n, t]
    pred = joint.sum(axis=2, keepdims=True)
    ratio = np.where(joint > 0, joint / np.where(pred > 0, pred, 1.0), 1.0)
    cond = -np.sum(joint * np.log2(ratio), axis=(1, 2))  # H(t | n)
    return np.maximum(entropy_bits(probs) - cond, 0.0)


def sensing_ig(belief: BeliefState, viewer: Pos, p_vis: float) -> float:
    """Expected information gained by sensing the 3x3 block around ``viewer``."""
    vx, vy = viewer
    cells = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            c = (vx + dx, vy + dy)
            if belief.in_bounds(c) and not belief.mask[c[1], c[0], pov_of(c, viewer)]:
                cells.append(c)
    if not cells:
        return 0.0
    ys = [c[1] for c in cells]
    xs = [c[0] for c in cells]
    return float(np.sum(mutual_information(belief.probs[ys, xs], p_vis)))


@dataclass(frozen=True)
class ActionEvaluation:
    action: Action
    ig: float


def expected_ig(belief: BeliefState, pos: Pos, action: Action, config: WorldConfig) -> ActionEvaluation:
    if action not in admissible_actions(pos, config):
        raise ValueError(f"{Action(action).name} is not admissible at {pos}")
    target = apply_action(pos, action, config)
    return ActionEvaluation(Action(action), sensing_ig(belief, target, config.p_vis))


def predict_map(belief: BeliefState) -> np.ndarray:
    """Posterior mode per cell; ties go to the smallest count."""
    return np.argmax(belief.probs, axis=-1)


def correct_count(pred: np.ndarray, truth: np.ndarray) -> int:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return int(np.sum(pred == truth))
