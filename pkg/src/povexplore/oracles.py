"""Independent reference computations used by tests and ``selfcheck``.

Nothing here calls the belief filter or the analytic IG; these are the slow,
obviously-correct routes they are checked against.
"""

from __future__ import annotations

import itertools
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import special, stats

Cell = Tuple[int, int]
Obs = Tuple[Cell, int, int]  # (cell, pov, n)


def _viewer_offsets():
    # pov index -> viewer offset, written out rather than derived
    return {
        0: (-1, -1), 1: (0, -1), 2: (1, -1),
        3: (-1, 0), 4: (0, 0), 5: (1, 0),
        6: (-1, 1), 7: (0, 1), 8: (1, 1),
    }


def observations_from(counts: np.ndarray, visibility: np.ndarray, viewer: Cell) -> List[Obs]:
    """What a viewer sees of every neighbouring cell on a tiny hand-built grid.

    ``counts[y, x]`` and ``visibility[y, x, slot, pov]`` follow the world layout.
    """
    h, w = counts.shape
    out = []
    for pov, (dx, dy) in _viewer_offsets().items():
        cx, cy = viewer[0] - dx, viewer[1] - dy
        if 0 <= cx < w and 0 <= cy < h:
            n = int(sum(visibility[cy, cx, k, pov] for k in range(counts[cy, cx])))
            out.append(((cx, cy), pov, n))
    return out


def brute_force_posterior(width: int, height: int, prior: Sequence[float], p_vis: float,
                          observations: Sequence[Obs]) -> np.ndarray:
    """Posterior count marginals by enumerating every joint (count, visibility) world.

    Only visibility bits for POVs that appear in ``observations`` are
    enumerated per cell; unobserved bits marginalise to 1 exactly.
    """
    t_max = len(prior) - 1
    cells = [(x, y) for y in range(height) for x in range(width)]
    povs: Dict[Cell, List[int]] = {c: sorted({p for (cc, p, _) in observations if cc == c}) for c in cells}

    def cell_worlds(c):
        k = len(povs[c])
        for t in range(t_max + 1):
            for bits in itertools.product((0, 1), repeat=t * k):
                grid = np.array(bits, dtype=int).reshape(t, k) if t else np.zeros((0, k), dtype=int)
                on = int(grid.sum())
                w = prior[t] * (p_vis**on) * ((1 - p_vis) ** (t * k - on))
                seen = {p: int(grid[:, j].sum()) for j, p in enumerate(povs[c])}
                yield t, w, seen

    per_cell = [list(cell_worlds(c)) for c in cells]
    post = np.zeros((height, width, t_max + 1))
    for combo in itertools.product(*per_cell):
        weight = 1.0
        for _, w, _ in combo:
            weight *= w
        if weight == 0.0:
            continue
        worlds = dict(zip(cells, combo))
        if all(worlds[c][2][p] == n for (c, p, n) in observations):
            for (x, y), (t, _, _) in worlds.items():
                post[y, x, t] += weight
    z = post.sum(axis=2, keepdims=True)
    if np.any(z == 0):
        raise ValueError("observation sequence has zero probability")
    return post / z


def sample_tiny_truth(width: int, height: int, prior: Sequence[float], p_vis: float,
                      rng: np.random.Generator):
    t_max = len(prior) - 1
    counts = rng.choice(t_max + 1, size=(height, width), p=np.asarray(prior))
    vis = rng.random((height, width, t_max, 9)) < p_vis
    return counts, vis


def _entropy2(p: np.ndarray) -> np.ndarray:
    return special.entr(p).sum(axis=-1) / np.log(2.0)


def monte_carlo_ig(cell_probs: np.ndarray, p_vis: float, samples: int,
                   rng: np.random.Generator) -> Tuple[float, float]:
    """Mean and standard error of the realised entropy drop from one fresh look
    at each cell in ``cell_probs`` (shape (cells, t_max + 1)).

    Each sample draws a count per cell from the belief, a visible count from
    Binomial(count, p_vis), and applies Bayes' rule directly.
    """
    cell_probs = np.atleast_2d(np.asarray(cell_probs, dtype=np.float64))
    k, nt = cell_probs.shape
    ts = np.arange(nt)
    drop = np.zeros(samples)
    for i in range(k):
        p = cell_probs[i]
        t = rng.choice(nt, size=samples, p=p / p.sum())
        n = rng.binomial(t, p_vis)
        lik = stats.binom.pmf(n[:, None], ts[None, :], p_vis)
        post = p[None, :] * lik
        post /= post.sum(axis=1, keepdims=True)
        drop += _entropy2(p[None, :])[0] - _entropy2(post)
    return float(drop.mean()), float(drop.std(ddof=1) / np.sqrt(samples))
