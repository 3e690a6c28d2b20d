"""Scene layout channels and their derivation from trajectory data."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .raster import (
    GridRaster,
    GridSpec,
    OutOfBoundsError,
    read_grid_text,
    read_pgm,
    write_grid_text,
    write_pgm,
)
from .trajectory import Scenario

SEG_CLASSES = ("building", "structure", "bush", "grass", "tree", "sidewalk", "road")
SEG_INDEX = {c: i for i, c in enumerate(SEG_CLASSES)}
BLOCKED_CLASSES = frozenset({SEG_INDEX["building"], SEG_INDEX["structure"], SEG_INDEX["bush"]})

DEFAULT_CELL_SIZE = 0.5


@dataclass(frozen=True, eq=False)
class SceneLayout:
    segmentation: GridRaster
    appearance: GridRaster
    density: GridRaster
    traversable: GridRaster
    population_prob: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.population_prob, dtype=float).ravel()
        if p.size == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("population_prob must be a non-negative vector summing to 1")
        p.flags.writeable = False
        object.__setattr__(self, "population_prob", p)
        seg = self.segmentation.values
        if np.any((seg < 0) | (seg >= len(SEG_CLASSES))):
            raise ValueError("segmentation classes must be in 0..6")
        for name in ("appearance", "traversable"):
            v = getattr(self, name).values
            if not np.all((v == 0) | (v == 1)):
                raise ValueError(f"{name} map must be binary")
        d = self.density.values
        if np.any((d < 0) | (d > 1)):
            raise ValueError("density map must lie in [0, 1]")

    @property
    def spec(self) -> GridSpec:
        return self.segmentation.spec

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        x0, y0, x1, y1 = self.spec.extent
        return np.array([x0, y0]), np.array([x1, y1])

    def with_overrides(self, **kw) -> "SceneLayout":
        return replace(self, **kw)


def _cells_checked(spec: GridSpec, xy, agent_id) -> np.ndarray:
    cells = spec.world_to_cell(np.atleast_2d(xy))
    inside = spec.contains_cell(cells)
    if not np.all(inside):
        bad = np.atleast_2d(xy)[~inside][0]
        raise OutOfBoundsError(f"agent {agent_id}: coordinate ({bad[0]:.3f}, {bad[1]:.3f}) lies outside the raster")
    return cells


def derive_appearance_map(agents, grid_spec: GridSpec) -> GridRaster:
    """Binary map of cells holding some agent's first or last coordinate."""
    vals = np.zeros(grid_spec.shape, dtype=np.int64)
    for a in agents:
        cells = _cells_checked(grid_spec, np.vstack([a.trajectory[0], a.trajectory[-1]]), a.id)
        vals[cells[:, 1], cells[:, 0]] = 1
    return GridRaster(grid_spec, vals)


def visit_counts(agents, grid_spec: GridSpec) -> np.ndarray:
    counts = np.zeros(grid_spec.shape, dtype=np.int64)
    for a in agents:
        cells = _cells_checked(grid_spec, a.trajectory, a.id)
        np.add.at(counts, (cells[:, 1], cells[:, 0]), 1)
    return counts


def density_from_counts(counts: np.ndarray) -> np.ndarray:
    logc = np.log1p(counts.astype(float))
    top = logc.max(initial=0.0)
    if top <= 0:
        return np.zeros_like(logc)
    return logc / top


def derive_density_map(agents, grid_spec: GridSpec) -> GridRaster:
    """``log(1 + visits)`` per cell, divided by its maximum over the raster."""
    return GridRaster(grid_spec, density_from_counts(visit_counts(agents, grid_spec)))


def default_support(max_count: int) -> int:
    return max(math.ceil(1.25 * max_count), max_count + 1)


def derive_population_prob(scenario: Scenario, K: int | None = None) -> np.ndarray:
    """Normalized histogram of per-frame concurrent agent counts over ``0..K-1``."""
    counts = scenario.alive_counts()
    top = int(counts.max(initial=0))
    if K is None:
        K = default_support(top)
    if K <= top:
        raise ValueError(f"support size K={K} must exceed the observed maximum population {top}")
    hist = np.bincount(counts, minlength=K).astype(float)
    return hist / hist.sum()


def derive_traversable_map(segmentation: GridRaster) -> GridRaster:
    seg = np.asarray(segmentation.values)
    if np.any((seg < 0) | (seg >= len(SEG_CLASSES))):
        bad = int(seg[(seg < 0) | (seg >= len(SEG_CLASSES))][0])
        raise ValueError(f"unknown segmentation class {bad}")
    blocked = np.isin(seg, list(BLOCKED_CLASSES))
    return GridRaster(segmentation.spec, (~blocked).astype(np.int64))


def occupancy_map(grid_spec: GridSpec, positions) -> GridRaster:
    """Binary map of cells holding a live agent; points off the raster are ignored."""
    vals = np.zeros(grid_spec.shape, dtype=np.int64)
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    if len(pos):
        cells = grid_spec.world_to_cell(pos)
        cells = cells[grid_spec.contains_cell(cells)]
        vals[cells[:, 1], cells[:, 0]] = 1
    return GridRaster(grid_spec, vals)


def build_layout(
    scenarios,
    segmentation: GridRaster,
    K: int | None = None,
) -> SceneLayout:
    """Derive every layout channel of one scene from its ground-truth scenarios."""
    scenarios = list(scenarios)
    agents = [a for s in scenarios for a in s.agents]
    spec = segmentation.spec
    counts = np.concatenate([s.alive_counts() for s in scenarios]) if scenarios else np.zeros(1, int)
    top = int(counts.max(initial=0))
    K = K or default_support(top)
    if K <= top:
        raise ValueError(f"support size K={K} must exceed the observed maximum population {top}")
    hist = np.bincount(counts, minlength=K).astype(float)
    return SceneLayout(
        segmentation=segmentation,
        appearance=derive_appearance_map(agents, spec),
        density=derive_density_map(agents, spec),
        traversable=derive_traversable_map(segmentation),
        population_prob=hist / hist.sum(),
    )


# --- scene config -------------------------------------------------------------

@dataclass
class SceneConfig:
    """Line-oriented ``key=value`` scene description."""

    scene: str = "scene"
    fps: float = 5.0
    scale: float = 1.0
    segmentation: str = "segmentation.pgm"
    appearance: str = "appearance.pgm"
    density: str = "density.grid"
    traversable: str = "traversable.pgm"
    population: str = "population.txt"
    homography: tuple | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "SceneConfig":
        cfg = cls()
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            if "=" not in s:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            k, v = (t.strip() for t in s.split("=", 1))
            if k in ("fps", "scale"):
                setattr(cfg, k, float(v))
            elif k == "homography":
                vals = tuple(float(t) for t in v.replace(",", " ").split())
                if len(vals) != 9:
                    raise ValueError(f"{path}:{lineno}: homography needs 9 numbers")
                cfg.homography = vals
            elif k in ("scene", "segmentation", "appearance", "density", "traversable", "population"):
                setattr(cfg, k, v)
            else:
                cfg.extra[k] = v
        return cfg

    def dump(self) -> str:
        lines = [
            f"scene={self.scene}",
            f"fps={self.fps:g}",
            f"scale={self.scale!r}",
            f"segmentation={self.segmentation}",
            f"appearance={self.appearance}",
            f"density={self.density}",
            f"traversable={self.traversable}",
            f"population={self.population}",
        ]
        if self.homography is not None:
            lines.append("homography=" + ",".join(repr(float(v)) for v in self.homography))
        lines += [f"{k}={v}" for k, v in sorted(self.extra.items())]
        return "\n".join(lines) + "\n"


def save_layout(layout: SceneLayout, directory, config: SceneConfig | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cfg = config or SceneConfig()
    write_pgm(layout.segmentation, d / cfg.segmentation)
    write_pgm(layout.appearance, d / cfg.appearance)
    write_pgm(layout.traversable, d / cfg.traversable)
    write_grid_text(layout.density, d / cfg.density)
    (d / cfg.population).write_text(" ".join(repr(float(p)) for p in layout.population_prob) + "\n")
    path = d / "scene.cfg"
    path.write_text(cfg.dump())
    return path


def load_layout(scene_cfg_path) -> tuple[SceneLayout, SceneConfig]:
    path = Path(scene_cfg_path)
    cfg = SceneConfig.load(path)
    d = path.parent
    seg = read_pgm(d / cfg.segmentation)
    app = read_pgm(d / cfg.appearance)
    app = app.with_values((app.values > 0).astype(np.int64))
    trav_path = d / cfg.traversable
    trav = read_pgm(trav_path) if trav_path.exists() else derive_traversable_map(seg)
    trav = trav.with_values((trav.values > 0).astype(np.int64))
    dens = read_grid_text(d / cfg.density)
    pop = np.array([float(v) for v in (d / cfg.population).read_text().split()])
    pop = pop / pop.sum()
    return SceneLayout(seg, app, dens, trav, pop), cfg
