"""Quick oracle, gradient and property checks bundled with the CLI."""

from __future__ import annotations

import time

import numpy as np

from . import belief as bel
from . import oracles
from .agents import GreedyIGAgent, RandomAgent
from .belief import BeliefState
from .harness import play_episode
from .neural import QNetworkDouble, QNetworkSingle, grad_check
from .seeding import derive_seed
from .world import Observation, WorldConfig


def check_entropy():
    vals = [bel.cell_entropy([0.25] * 4), bel.cell_entropy([1, 0, 0, 0]), bel.cell_entropy([0.5, 0.5])]
    err = max(abs(v - e) for v, e in zip(vals, [2.0, 0.0, 1.0]))
    return err <= 1e-12, f"max error {err:.1e}"


def check_filter(sequences=20, seed=0):
    rng = np.random.default_rng(seed)
    prior, p_vis = [0.5, 0.3, 0.2], 0.5
    worst = 0.0
    for _ in range(sequences):
        counts, vis = oracles.sample_tiny_truth(2, 1, prior, p_vis, rng)
        b = BeliefState.from_prior(2, 1, prior)
        seen = []
        for _ in range(int(rng.integers(1, 5))):
            obs = oracles.observations_from(counts, vis, (int(rng.integers(2)), 0))
            seen.extend(obs)
            b = bel.update(b, [Observation(c, p, n) for c, p, n in obs], p_vis)
        ref = oracles.brute_force_posterior(2, 1, prior, p_vis, seen)
        worst = max(worst, float(np.max(np.abs(ref - b.probs))))
    return worst < 1e-9, f"max abs diff {worst:.1e}"


def check_ig(cases=3, samples=100_000, seed=1):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        probs = rng.dirichlet(np.ones(4), size=5)
        exact = float(np.sum(bel.mutual_information(probs, 0.5)))
        mean, se = oracles.monte_carlo_ig(probs, 0.5, samples, rng)
        worst = max(worst, abs(mean - exact) / se)
    return worst < 3.0, f"worst deviation {worst:.2f} standard errors"


def check_gradients(seed=0):
    rng = np.random.default_rng(seed)
    single = QNetworkSingle(14, rng)
    e1 = grad_check(single, rng.random((14, 3, 3)), 1e-5, rng)
    double = QNetworkDouble(14, rng)
    e2 = grad_check(double, (rng.random((14, 3, 3)), rng.random((14, 5, 5))), 1e-5, rng)
    return max(e1, e2) < 1e-4, f"single {e1:.1e}, double {e2:.1e}"


def check_seeds(samples=2000, seed=2):
    rng = np.random.default_rng(seed)
    flips = []
    for s in rng.integers(0, 2**63, size=samples, dtype=np.uint64):
        s = int(s)
        if derive_seed(s, 0) == derive_seed(s, 1):
            return False, f"collision at master seed {s}"
        bit = int(rng.integers(64))
        flips.append(bin(derive_seed(s, 3) ^ derive_seed(s ^ (1 << bit), 3)).count("1"))
    mean = float(np.mean(flips))
    return mean >= 20, f"mean avalanche {mean:.1f} bits"


def check_episode():
    cfg = WorldConfig(width=8, height=8, max_steps=60)
    log = play_episode(GreedyIGAgent(), cfg, 7, step_cost=0.01)
    rows = log.rows
    lhs = sum(log.rewards)
    rhs = rows[0].total_entropy - rows[-1].total_entropy - 0.01 * (len(rows) - 1)
    again = play_episode(GreedyIGAgent(), cfg, 7, step_cost=0.01)
    same = again.rows == rows
    rnd = play_episode(RandomAgent(), cfg, 7)
    povs = [r.unique_povs_observed for r in rnd.rows]
    ok = abs(lhs - rhs) < 1e-9 and same and povs == sorted(povs)
    return ok, f"telescoping gap {abs(lhs - rhs):.1e}, deterministic={same}"


CHECKS = [
    ("entropy values", check_entropy),
    ("filter vs brute force", check_filter),
    ("expected IG vs Monte Carlo", check_ig),
    ("gradient check", check_gradients),
    ("seed derivation", check_seeds),
    ("episode invariants", check_episode),
]


def run_selfcheck(echo=print) -> bool:
    all_ok = True
    for name, fn in CHECKS:
        t = time.perf_counter()
        ok, detail = fn()
        all_ok &= ok
        echo(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({time.perf_counter() - t:.1f}s)")
    return all_ok
