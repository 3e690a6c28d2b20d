import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdgen.layout import (
    SEG_CLASSES,
    SEG_INDEX,
    SceneConfig,
    SceneLayout,
    build_layout,
    default_support,
    derive_appearance_map,
    derive_density_map,
    derive_population_prob,
    derive_traversable_map,
    load_layout,
    occupancy_map,
    save_layout,
)
from crowdgen.raster import GridRaster, GridSpec, OutOfBoundsError, read_grid_text, read_pgm, write_grid_text, write_pgm
from crowdgen.trajectory import Agent, Scenario

from conftest import random_scenario, scenarios

SPEC = GridSpec(10, 8, 1.0)


def agent_through(aid, cells, spawn=0):
    return Agent(aid, "pedestrian", spawn, np.asarray(cells, float) + 0.5)


# --- raster geometry ---------------------------------------------------------------

def test_grid_spec_rejects_bad_geometry():
    with pytest.raises(ValueError):
        GridSpec(0, 3, 1.0)
    with pytest.raises(ValueError):
        GridSpec(3, 3, 0.0)
    with pytest.raises(ValueError):
        GridRaster(GridSpec(3, 2, 1.0), np.zeros((3, 2)))


@given(st.integers(1, 40), st.integers(1, 40), st.floats(0.1, 3.0), st.floats(-50, 50), st.floats(-50, 50))
def test_cell_center_round_trips(w, h, cs, ox, oy):
    spec = GridSpec(w, h, cs, (ox, oy))
    cells = np.stack(np.meshgrid(np.arange(w), np.arange(h)), -1).reshape(-1, 2)
    assert np.array_equal(spec.world_to_cell(spec.cell_center(cells)), cells)


def test_pgm_and_grid_text_round_trip(tmp_path, rng):
    spec = GridSpec(7, 5, 0.5, (1.25, -2.0))
    cat = GridRaster(spec, rng.integers(0, 7, spec.shape))
    write_pgm(cat, tmp_path / "a.pgm")
    assert read_pgm(tmp_path / "a.pgm") == cat
    cont = GridRaster(spec, rng.random(spec.shape))
    write_grid_text(cont, tmp_path / "d.grid")
    back = read_grid_text(tmp_path / "d.grid")
    assert back.spec == spec and np.array_equal(back.values, cont.values)


# --- appearance map ----------------------------------------------------------------

def test_appearance_marks_exactly_start_and_end_cells():
    a = agent_through(0, [(3, 4), (5, 2), (7, 1)])
    vals = derive_appearance_map([a], SPEC).values
    assert set(zip(*np.nonzero(vals.T))) == {(3, 4), (7, 1)}


def test_appearance_of_no_agents_is_empty():
    assert derive_appearance_map([], SPEC).values.sum() == 0


def test_appearance_rejects_out_of_bounds_agent_by_id():
    with pytest.raises(OutOfBoundsError, match="agent 42"):
        derive_appearance_map([agent_through(42, [(1, 1), (30, 1)])], SPEC)


def test_appearance_matches_mark_and_compare(rng):
    agents = [agent_through(i, rng.integers(0, (10, 8), (int(rng.integers(1, 6)), 2))) for i in range(5)]
    expected = np.zeros(SPEC.shape, int)
    for a in agents:
        for p in (a.start, a.destination):
            expected[int(p[1]), int(p[0])] = 1
    assert np.array_equal(derive_appearance_map(agents, SPEC).values, expected)


# --- density map -------------------------------------------------------------------

def test_density_single_static_agent():
    vals = derive_density_map([agent_through(0, [(2, 3)] * 10)], SPEC).values
    assert vals[3, 2] == 1.0 and vals.sum() == 1.0


def test_density_log_ratio_of_hand_counts():
    agents = [agent_through(0, [(1, 1)] * 9), agent_through(1, [(4, 4)] * 99)]
    vals = derive_density_map(agents, SPEC).values
    assert vals[1, 1] == pytest.approx(math.log(10) / math.log(100), abs=1e-12)
    assert vals[4, 4] == 1.0


def test_density_without_agents_is_zero():
    assert not derive_density_map([], SPEC).values.any()


def test_density_monotone_when_max_cell_unchanged():
    base = [agent_through(0, [(0, 0)] * 50), agent_through(1, [(5, 5)] * 3)]
    more = base + [agent_through(2, [(5, 5)] * 4)]
    a, b = derive_density_map(base, SPEC).values, derive_density_map(more, SPEC).values
    assert b[5, 5] > a[5, 5] and np.all(b >= a)


# --- population ---------------------------------------------------------------------

def test_population_one_hot_for_constant_pair():
    sc = Scenario(5.0, 10, (agent_through(0, [(1, 1)] * 10), agent_through(1, [(2, 2)] * 10)))
    p = derive_population_prob(sc, K=4)
    assert np.array_equal(p, [0, 0, 1, 0])


def test_population_half_and_half():
    agents = [agent_through(0, [(1, 1)] * 20)] + [agent_through(i, [(2, 2)] * 10, spawn=10) for i in (1, 2)]
    p = derive_population_prob(Scenario(5.0, 20, tuple(agents)), K=5)
    assert p[1] == 0.5 and p[3] == 0.5


def test_population_rejects_small_support():
    sc = Scenario(5.0, 3, (agent_through(0, [(1, 1)] * 3), agent_through(1, [(2, 2)] * 3)))
    with pytest.raises(ValueError):
        derive_population_prob(sc, K=2)


def test_default_support_adds_a_quarter():
    assert default_support(8) == 10
    assert default_support(0) == 1


@settings(max_examples=40)
@given(scenarios())
def test_population_matches_per_frame_counter(sc):
    counts = [sum(a.spawn_frame <= t <= a.end_frame for a in sc.agents) for t in range(sc.total_frames)]
    p = derive_population_prob(sc)
    expected = np.bincount(counts, minlength=len(p)) / len(counts)
    assert np.allclose(p, expected, atol=1e-15)
    assert abs(p.sum() - 1) <= 1e-9
    shuffled = Scenario(sc.fps, sc.total_frames, tuple(reversed(sc.agents)), sc.scene_id)
    assert np.array_equal(derive_population_prob(shuffled), p)


# --- traversable map ----------------------------------------------------------------

def test_traversable_extremes():
    side = GridRaster(SPEC, np.full(SPEC.shape, SEG_INDEX["sidewalk"]))
    bld = GridRaster(SPEC, np.full(SPEC.shape, SEG_INDEX["building"]))
    assert derive_traversable_map(side).values.all()
    assert not derive_traversable_map(bld).values.any()


def test_traversable_per_cell_lookup(rng):
    seg = GridRaster(SPEC, rng.integers(0, len(SEG_CLASSES), SPEC.shape))
    walkable = {c: SEG_CLASSES[c] not in ("building", "structure", "bush") for c in range(len(SEG_CLASSES))}
    expected = np.vectorize(lambda c: int(walkable[c]))(seg.values)
    assert np.array_equal(derive_traversable_map(seg).values, expected)


def test_traversable_rejects_unknown_class():
    with pytest.raises(ValueError):
        derive_traversable_map(GridRaster(SPEC, np.full(SPEC.shape, 9)))


# --- layout ------------------------------------------------------------------------

def test_scene_layout_invariants():
    seg = GridRaster(SPEC, np.full(SPEC.shape, SEG_INDEX["grass"]))
    ones = GridRaster(SPEC, np.ones(SPEC.shape, int))
    with pytest.raises(ValueError):
        SceneLayout(seg, ones, ones, ones, np.array([0.5, 0.4]))
    with pytest.raises(ValueError):
        SceneLayout(seg, GridRaster(SPEC, np.full(SPEC.shape, 2)), ones, ones, np.array([1.0]))
    with pytest.raises(ValueError):
        SceneLayout(seg, ones, GridRaster(SPEC, np.full(SPEC.shape, 1.5)), ones, np.array([1.0]))


def test_layout_derivation_is_idempotent_and_saves(tmp_path, rng):
    sc = random_scenario(rng, 8, 50)
    seg = GridRaster(GridSpec(20, 20, 0.5), rng.integers(3, 7, (20, 20)))
    a, b = build_layout([sc], seg), build_layout([sc], seg)
    assert a.appearance == b.appearance and a.density == b.density and a.traversable == b.traversable
    path = save_layout(a, tmp_path / "scene", SceneConfig(scene="demo", fps=5.0))
    back, cfg = load_layout(path)
    assert cfg.scene == "demo"
    assert back.segmentation == a.segmentation and back.appearance == a.appearance
    assert np.array_equal(back.density.values, a.density.values)
    assert np.array_equal(back.population_prob, a.population_prob)


def test_occupancy_map_ignores_points_off_raster():
    occ = occupancy_map(SPEC, [(0.5, 0.5), (9.5, 7.5), (50.0, 1.0)])
    assert occ.values.sum() == 2


def test_scene_config_parses_homography_and_extras(tmp_path):
    p = tmp_path / "scene.cfg"
    p.write_text("scene=eth\nfps=2.5\nhomography=1,0,0 0,1,0 0,0,1\nnote=x\n# comment\n")
    cfg = SceneConfig.load(p)
    assert cfg.fps == 2.5 and cfg.homography == (1, 0, 0, 0, 1, 0, 0, 0, 1) and cfg.extra == {"note": "x"}
    p.write_text("garbage\n")
    with pytest.raises(ValueError, match=":1:"):
        SceneConfig.load(p)
