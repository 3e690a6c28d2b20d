"""Synthetic scenes with known structure, simulated with ORCA as stand-in ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .emitter import AgentSpec
from .layout import SEG_INDEX, SceneLayout, build_layout, derive_traversable_map
from .navmesh import NavGraph
from .orca import AGENT_RADIUS, OrcaConfig, orca_rollout
from .raster import GridRaster, GridSpec
from .trajectory import Agent, Scenario


@dataclass
class Fixture:
    scenarios: list
    layout: SceneLayout
    navgraph: NavGraph
    start_region: tuple  # (x0, y0, x1, y1) where agents appear
    goal_region: tuple

    def in_start_region(self, xy) -> np.ndarray:
        return _inside(xy, self.start_region)


def _inside(xy, box) -> np.ndarray:
    xy = np.asarray(xy, float).reshape(-1, 2)
    x0, y0, x1, y1 = box
    return (xy[:, 0] >= x0) & (xy[:, 0] <= x1) & (xy[:, 1] >= y0) & (xy[:, 1] <= y1)


def _uniform(rng, box, n):
    x0, y0, x1, y1 = box
    return np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)])


LEAD_IN = 150
LEAD_OUT = 150


def _recording(specs, nav, frames: int, fps: float, scene_id: str, radius: float = AGENT_RADIUS) -> Scenario:
    """Simulate with lead-in and lead-out margins and keep the middle ``frames`` frames,
    so the recording starts and ends mid-stream like a real capture."""
    full = orca_rollout(specs, nav, LEAD_IN + frames + LEAD_OUT, fps, scene_id=scene_id, ocfg=OrcaConfig(radius=radius))
    kept = []
    for a in full.agents:
        lo, hi = max(a.spawn_frame, LEAD_IN), min(a.end_frame, LEAD_IN + frames - 1)
        if lo > hi:
            continue
        tr = a.trajectory[lo - a.spawn_frame: hi - a.spawn_frame + 1]
        kept.append(Agent(len(kept), a.kind, lo - LEAD_IN, tr))
    return Scenario(fps, frames, tuple(kept), scene_id)


def _arrivals(rng, frames: int, rate: float) -> np.ndarray:
    """Spawn frames of a Bernoulli arrival process with ``rate`` agents per frame."""
    return np.flatnonzero(rng.random(frames) < rate)


def corridor_segmentation(length: float = 24.0, width: float = 8.0, cell: float = 0.5) -> GridRaster:
    """Sidewalk corridor walled by one row of building cells on each long side."""
    spec = GridSpec(int(round(length / cell)), int(round(width / cell)), cell)
    seg = np.full(spec.shape, SEG_INDEX["sidewalk"], dtype=np.int64)
    seg[0, :] = SEG_INDEX["building"]
    seg[-1, :] = SEG_INDEX["building"]
    return GridRaster(spec, seg)


def corridor_fixture(
    seed: int = 0,
    n_scenarios: int = 4,
    frames: int = 600,
    rate: float = 0.06,
    length: float = 24.0,
    width: float = 8.0,
    fps: float = 5.0,
) -> Fixture:
    """Agents appear at the left edge and walk at about 1 m/s to the right edge."""
    rng = np.random.default_rng(seed)
    seg = corridor_segmentation(length, width)
    nav = NavGraph(derive_traversable_map(seg))
    start_box = (0.5, 1.0, 1.5, width - 1.0)
    goal_box = (length - 1.5, 1.0, length - 0.5, width - 1.0)
    scenarios = []
    for k in range(n_scenarios):
        spawns = _arrivals(rng, LEAD_IN + frames, rate)
        n = len(spawns)
        starts, goals = _uniform(rng, start_box, n), _uniform(rng, goal_box, n)
        paces = rng.uniform(0.9, 1.1, n)
        specs = [AgentSpec("pedestrian", float(p), int(f), s, g) for p, f, s, g in zip(paces, spawns, starts, goals)]
        scenarios.append(_recording(specs, nav, frames, fps, "corridor"))
    layout = build_layout(scenarios, seg)
    return Fixture(scenarios, layout, nav, start_box, goal_box)


def crossing_fixture(
    seed: int = 0,
    n_scenarios: int = 4,
    frames: int = 600,
    rate: float = 0.08,
    size: float = 20.0,
    fps: float = 5.0,
    radius: float = AGENT_RADIUS,
) -> Fixture:
    """Two perpendicular streams (west to east, south to north) crossing mid-square.

    ``radius`` is the personal-space radius the ground-truth walkers keep.
    """
    rng = np.random.default_rng(seed)
    cell = 0.5
    spec = GridSpec(int(round(size / cell)), int(round(size / cell)), cell)
    seg = GridRaster(spec, np.full(spec.shape, SEG_INDEX["sidewalk"], dtype=np.int64))
    nav = NavGraph(derive_traversable_map(seg))
    mid, half = size / 2, 2.0
    west = (0.5, mid - half, 1.5, mid + half)
    east = (size - 1.5, mid - half, size - 0.5, mid + half)
    south = (mid - half, 0.5, mid + half, 1.5)
    north = (mid - half, size - 1.5, mid + half, size - 0.5)
    scenarios = []
    for k in range(n_scenarios):
        specs = []
        for src, dst in ((west, east), (south, north)):
            spawns = _arrivals(rng, LEAD_IN + frames, rate / 2)
            n = len(spawns)
            starts, goals = _uniform(rng, src, n), _uniform(rng, dst, n)
            paces = rng.uniform(1.0, 1.3, n)
            specs += [AgentSpec("pedestrian", float(p), int(f), s, g) for p, f, s, g in zip(paces, spawns, starts, goals)]
        specs.sort(key=lambda s: s.spawn_frame)
        scenarios.append(_recording(specs, nav, frames, fps, "crossing", radius))
    layout = build_layout(scenarios, seg)
    box = (0.0, 0.0, size, size)
    return Fixture(scenarios, layout, nav, box, box)


def uniform_layout(layout: SceneLayout) -> SceneLayout:
    """Same scene with a flat appearance map over walkable cells and a uniform population prior."""
    P = np.full(len(layout.population_prob), 1.0 / len(layout.population_prob))
    return layout.with_overrides(appearance=layout.traversable, population_prob=P)


def scenario_agents_inside(scenario: Scenario, box) -> float:
    """Fraction of agents whose first position lies inside ``box``."""
    if not len(scenario):
        return float("nan")
    starts = np.array([a.start for a in scenario.agents])
    return float(_inside(starts, box).mean())
