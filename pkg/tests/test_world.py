import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from povexplore.errors import ConfigError, MovementError
from povexplore.world import (
    Action,
    WorldConfig,
    admissible_actions,
    apply_action,
    generate_world,
    observable_povs,
    pov_of,
    pov_offset,
    sense,
    true_target_map,
)

CFG = WorldConfig()


def test_defaults():
    assert (CFG.width, CFG.height, CFG.max_steps) == (20, 20, 1000)
    assert CFG.count_prior == (0.5, 0.3, 0.15, 0.05)
    assert CFG.t_max == 3 and CFG.p_vis == 0.5


@pytest.mark.parametrize("kwargs", [
    {"width": 2},
    {"height": 1},
    {"p_vis": 0.0},
    {"p_vis": 1.5},
    {"count_prior": (0.5, 0.5)},
    {"count_prior": (0.5, 0.3, 0.15, 0.06)},
    {"count_prior": (1.2, -0.2, 0.0, 0.0)},
])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        WorldConfig(**kwargs)


def test_generate_full_visibility():
    w = generate_world(WorldConfig(p_vis=1.0), 3)
    for y in range(20):
        for x in range(20):
            cell = w.cell((x, y))
            assert all(m == 0b111111111 for m in cell.visibility)
            assert len(cell.visibility) == cell.count


def test_generate_point_mass_prior():
    w = generate_world(WorldConfig(count_prior=(1, 0, 0, 0)), 11)
    assert not w.counts.any()
    assert not w.visibility.any()


def test_generate_deterministic():
    a = generate_world(CFG, 42)
    b = generate_world(CFG, 42)
    c = generate_world(CFG, 43)
    assert np.array_equal(a.counts, b.counts) and np.array_equal(a.visibility, b.visibility)
    assert a.dump() == b.dump()
    assert not np.array_equal(a.visibility, c.visibility)


def test_generate_start_and_bounds():
    w = generate_world(WorldConfig(width=7, height=5), 0)
    assert w.agent_pos == (3, 2)
    assert w.counts.shape == (5, 7)
    assert w.counts.max() <= 3


def test_generation_statistics():
    w = generate_world(WorldConfig(width=100, height=100), 5)
    freq = np.bincount(w.counts.ravel(), minlength=4) / 10_000
    np.testing.assert_allclose(freq, [0.5, 0.3, 0.15, 0.05], atol=0.015)
    used = w.visibility[w.counts >= 1][:, 0, :]
    assert abs(used.mean() - 0.5) < 0.01


@pytest.mark.parametrize("cell, viewer, expected", [
    ((5, 5), (5, 5), 4),
    ((5, 5), (6, 5), 5),
    ((5, 5), (4, 4), 0),
    ((5, 5), (6, 6), 8),
    ((5, 5), (5, 4), 1),
])
def test_pov_of(cell, viewer, expected):
    assert pov_of(cell, viewer) == expected


def test_pov_of_rejects_far_viewer():
    with pytest.raises(ValueError):
        pov_of((5, 5), (7, 5))


def test_pov_encoding_bijective():
    seen = {pov_of((0, 0), (dx, dy)) for dx in (-1, 0, 1) for dy in (-1, 0, 1)}
    assert seen == set(range(9))
    for k in range(9):
        assert pov_of((0, 0), pov_offset(k)) == k


@pytest.mark.parametrize("pos, expected", [
    ((0, 0), {Action.RIGHT, Action.DOWN}),
    ((10, 10), set(Action)),
    ((0, 10), {Action.UP, Action.DOWN, Action.RIGHT}),
    ((19, 19), {Action.UP, Action.LEFT}),
])
def test_admissible_actions(pos, expected):
    assert set(admissible_actions(pos, CFG)) == expected


def test_apply_action():
    assert apply_action((3, 3), Action.UP, CFG) == (3, 2)
    assert apply_action((19, 19), Action.UP, CFG) == (19, 18)
    assert apply_action((3, 3), Action.RIGHT, CFG) == (4, 3)
    with pytest.raises(MovementError):
        apply_action((0, 0), Action.LEFT, CFG)


def test_sense_corner_and_edges():
    w = generate_world(CFG, 1)
    assert len(sense(w, (0, 0))) == 4
    assert len(sense(w, (0, 7))) == 6
    assert len(sense(w, (7, 7))) == 9


def test_observable_povs_is_union_of_all_views():
    cfg = WorldConfig(width=5, height=4)
    w = generate_world(cfg, 0)
    seen = np.zeros((4, 5, 9), dtype=bool)
    for y in range(4):
        for x in range(5):
            for o in sense(w, (x, y)):
                seen[o.cell[1], o.cell[0], o.pov] = True
    obs = observable_povs(5, 4)
    np.testing.assert_array_equal(obs, seen)
    assert obs[0, 0].sum() == 4 and obs[0, 2].sum() == 6 and obs[1, 2].sum() == 9
    assert not obs.flags.writeable


def test_sense_empty_cells_and_full_visibility():
    empty = generate_world(WorldConfig(count_prior=(1, 0, 0, 0)), 0)
    assert all(o.n == 0 for o in sense(empty, (4, 4)))
    full = generate_world(WorldConfig(p_vis=1.0), 2)
    for o in sense(full, (4, 4)):
        assert o.n == full.counts[o.cell[1], o.cell[0]]


def test_sense_matches_cell_truth():
    w = generate_world(CFG, 9)
    for o in sense(w, (10, 10)):
        assert o.pov == pov_of(o.cell, (10, 10))
        assert o.n == w.cell(o.cell).visible_from(o.pov)


def test_true_target_map():
    w = generate_world(WorldConfig(count_prior=(1, 0, 0, 0)), 0)
    assert not true_target_map(w).any()
    w.counts[3, 2] = 1
    m = true_target_map(w)
    assert m[3, 2] == 1 and m.sum() == 1
    w.agent_pos = (0, 0)
    assert np.array_equal(true_target_map(w), m)


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**32),
    x=st.integers(0, 7),
    y=st.integers(0, 5),
    p_vis=st.sampled_from([0.3, 0.5, 1.0]),
)
def test_sense_properties(seed, x, y, p_vis):
    cfg = WorldConfig(width=8, height=6, p_vis=p_vis)
    w = generate_world(cfg, seed)
    obs = sense(w, (x, y))
    inside_x = 3 - (x == 0) - (x == 7)
    inside_y = 3 - (y == 0) - (y == 5)
    assert len(obs) == inside_x * inside_y
    assert obs == sense(w, (x, y))
    for o in obs:
        t = w.counts[o.cell[1], o.cell[0]]
        assert 0 <= o.n <= t
        if p_vis == 1.0:
            assert o.n == t
