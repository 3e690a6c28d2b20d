"""Training, generation and rendering pipelines shared by the command line and the tests."""

from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .emitter import (
    AgentPrior,
    AgentSpec,
    EmitterModel,
    NoiseSchedule,
    build_emitter_dataset,
    default_denoiser_spec,
    emit_agents,
    fit_param_stats,
    is_complete,
    train_emitter,
)
from .layout import SceneLayout, occupancy_map
from .navmesh import NavGraph
from .nn import load_checkpoint, save_checkpoint
from .orca import se_orca_generate
from .raster import GridRaster
from .rng import substream
from .simulator import ABLATIONS, SimConfig, SimState, SimulatorModel, build_simulator_dataset, run_alternation, step_window, train_simulator
from .trajectory import KINDS, Scenario
from .vocab import BehaviorVocab, kmeans_fit, segment_and_normalize

log = logging.getLogger(__name__)

ENGINES = ("crowdes", "se-orca")
VOCAB_FILE = "vocab.txt"
EMITTER_FILE = "emitter.ckpt"
SIMULATOR_FILE = "simulator.ckpt"
PRIOR_FILE = "prior.ckpt"


class MissingArtifactError(FileNotFoundError):
    pass


@dataclass
class RunConfig:
    scene: str = "scene"
    engine: str = "crowdes"
    duration_frames: int = 500
    fps: float = 5.0
    T_w: int = 50
    T_f: int = 20
    T_h: int = 10
    B: int = 8
    M: int = 50
    seed: int = 0
    ablate: tuple = ()
    # training
    emitter_epochs: int = 256
    emitter_batch: int = 512
    emitter_lr: float = 1e-4
    sim_epochs: int = 64
    sim_batch: int = 2048
    sim_lr: float = 1e-4
    segment_stride: int = 0  # 0: one segment origin every T_f frames
    window_stride: int = 0  # 0: one emitter window every T_w frames
    # user controls
    kind: str = ""
    pace_min: float = 0.0
    pace_max: float = 0.0
    population: tuple = ()
    appearance: str = ""
    # paths
    data: str = ""
    layout: str = ""
    checkpoints: str = ""
    output: str = ""

    def __post_init__(self):
        if isinstance(self.ablate, str):
            self.ablate = tuple(a for a in self.ablate.split(",") if a)
        self.ablate = tuple(self.ablate)
        if isinstance(self.population, str):
            self.population = tuple(float(p) for p in self.population.split(",") if p)
        self.population = tuple(float(p) for p in self.population)
        bad = set(self.ablate) - set(ABLATIONS)
        if bad:
            raise ValueError(f"unknown ablation(s): {', '.join(sorted(bad))}")
        if self.engine not in ENGINES:
            raise ValueError(f"engine must be one of {ENGINES}, got {self.engine!r}")
        for name in ("T_w", "T_f", "T_h", "B", "M"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.duration_frames < 0:
            raise ValueError("duration_frames must be non-negative")
        if self.kind and self.kind not in KINDS:
            raise ValueError(f"unknown agent kind {self.kind!r}")
        if self.T_w % self.T_f:
            warnings.warn(f"window length {self.T_w} is not a multiple of segment length {self.T_f}", stacklevel=3)

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(f.default) for f in dataclasses.fields(cls)}

    @classmethod
    def from_pairs(cls, pairs: dict, base: "RunConfig | None" = None) -> "RunConfig":
        """Build a config from string ``key=value`` pairs layered over ``base``."""
        types = cls.field_types()
        values = dataclasses.asdict(base) if base else {}
        for k, v in pairs.items():
            key = k.replace("-", "_")
            if key not in types:
                raise ValueError(f"unknown config key {k!r}")
            t = types[key]
            if t is tuple or not isinstance(v, str):
                values[key] = v
            elif t is bool:
                values[key] = v.lower() in ("1", "true", "yes")
            else:
                values[key] = t(v)
        return cls(**values)

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "RunConfig":
        pairs = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            pairs[k.strip()] = v.strip()
        pairs.update(overrides or {})
        return cls.from_pairs(pairs)

    def dump(self) -> str:
        lines = []
        for k, v in dataclasses.asdict(self).items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    def sim_config(self) -> SimConfig:
        return SimConfig(T_f=self.T_f, T_h=self.T_h, fps=self.fps, ablations=self.ablate)


@dataclass
class TrainedModels:
    vocab: BehaviorVocab
    emitter: EmitterModel
    simulator: SimulatorModel
    prior: AgentPrior = field(default_factory=AgentPrior)

    @classmethod
    def load(cls, directory) -> "TrainedModels":
        d = Path(directory)
        for name in (VOCAB_FILE, EMITTER_FILE, SIMULATOR_FILE):
            if not (d / name).is_file():
                raise MissingArtifactError(f"missing checkpoint {d / name}")
        prior = AgentPrior()
        if (d / PRIOR_FILE).is_file():
            arrays, _ = load_checkpoint(d / PRIOR_FILE)
            prior = AgentPrior(arrays["paces"], arrays["kind_probs"])
        return cls(BehaviorVocab.load(d / VOCAB_FILE), EmitterModel.load(d / EMITTER_FILE),
                   SimulatorModel.load(d / SIMULATOR_FILE), prior)


# --- training ---------------------------------------------------------------------

def complete_agents(scenario: Scenario) -> Scenario:
    """Agents whose whole track lies inside the recording; truncated ones lack a true destination."""
    return dataclasses.replace(scenario, agents=tuple(a for a in scenario.agents if is_complete(a, scenario)))


def train(config: RunConfig, scenarios, layout: SceneLayout, navgraph: NavGraph | None = None, out_dir=None) -> TrainedModels:
    """Fit the behavior vocabulary, the simulator and the emitter; optionally write checkpoints."""
    scenarios = [s for s in scenarios if len(s)]
    if not scenarios:
        raise ValueError("training data holds no agents")
    navgraph = navgraph or NavGraph(layout.traversable)
    cfg = config.sim_config()
    nav_for_segments = None if "no-navmesh" in cfg.ablations else navgraph
    B = 1 if "no-switching" in config.ablate else config.B
    vocab_segs = [seg for sc in scenarios
                  for seg in segment_and_normalize(complete_agents(sc), nav_for_segments, config.T_f, cfg.control_horizon, cfg.scale_by)]
    if not vocab_segs:
        raise ValueError(f"no agent lives longer than {config.T_f} frames; nothing to segment")
    vocab = kmeans_fit(vocab_segs, B, seed=config.seed, T_f=config.T_f)
    stride = config.segment_stride or None
    segs = [segment_and_normalize(complete_agents(sc), nav_for_segments, config.T_f, cfg.control_horizon, cfg.scale_by, stride)
            for sc in scenarios]
    dataset = build_simulator_dataset(scenarios, layout, navgraph, vocab, cfg, segs)
    simulator = train_simulator(dataset, vocab, cfg, config.sim_epochs, config.sim_batch,
                                substream(config.seed, "train-simulator"), config.sim_lr, seed=config.seed)
    stats = fit_param_stats(scenarios, layout, config.T_w)
    edata = build_emitter_dataset(scenarios, layout, stats, config.T_w, substream(config.seed, "emitter-data"),
                                  config.window_stride or None)
    emitter = train_emitter(edata, stats, config.emitter_epochs, config.emitter_batch, substream(config.seed, "train-emitter"),
                            config.emitter_lr, NoiseSchedule.linear(config.M), default_denoiser_spec(config.seed), config.T_w)
    models = TrainedModels(vocab, emitter, simulator, AgentPrior.from_scenarios(scenarios))
    if out_dir is not None:
        save_models(models, out_dir, config)
    return models


def save_models(models: TrainedModels, out_dir, config: RunConfig | None = None) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    models.vocab.save(d / VOCAB_FILE)
    models.emitter.save(d / EMITTER_FILE)
    models.simulator.save(d / SIMULATOR_FILE)
    save_checkpoint(d / PRIOR_FILE, {"paces": models.prior.paces, "kind_probs": models.prior.kind_probs}, {"model": "prior"})
    with open(d / "losses_emitter.csv", "w") as fh:
        fh.write("epoch,mse\n")
        fh.writelines(f"{i},{v:.8f}\n" for i, v in enumerate(models.emitter.loss_log))
    with open(d / "losses_simulator.csv", "w") as fh:
        fh.write("epoch,transition_ce,decoder_mae\n")
        fh.writelines(f"{i},{ce:.8f},{mae:.8f}\n" for i, (ce, mae) in enumerate(models.simulator.loss_log))
    with open(d / "vocab_sse.csv", "w") as fh:
        fh.write("iteration,sse\n")
        fh.writelines(f"{i},{v:.8f}\n" for i, v in enumerate(models.vocab.sse_history))
    if config is not None:
        (d / "train.cfg").write_text(config.dump())


# --- generation ---------------------------------------------------------------------

def apply_layout_overrides(config: RunConfig, layout: SceneLayout) -> SceneLayout:
    kw = {}
    if config.population:
        p = np.asarray(config.population, float)
        if np.any(p < 0) or p.sum() <= 0:
            raise ValueError("population override must be non-negative with positive mass")
        kw["population_prob"] = p / p.sum()
    if config.appearance:
        from .raster import read_grid_text, read_pgm

        path = Path(config.appearance)
        r = read_pgm(path) if path.suffix == ".pgm" else read_grid_text(path)
        if r.spec != layout.spec:
            raise ValueError(f"appearance override {path} does not match the scene raster geometry")
        kw["appearance"] = GridRaster(r.spec, (np.asarray(r.values) > 0).astype(np.int64))
    return layout.with_overrides(**kw) if kw else layout


def agent_adjuster(config: RunConfig):
    """Per-agent user controls: forced kind and pace clamp."""
    def adjust(specs: list[AgentSpec]) -> list[AgentSpec]:
        out = []
        for s in specs:
            pace = s.pace
            if config.pace_min > 0:
                pace = max(pace, config.pace_min)
            if config.pace_max > 0:
                pace = min(pace, config.pace_max)
            out.append(dataclasses.replace(s, kind=config.kind or s.kind, pace=pace))
        return out

    return adjust


def generate(
    config: RunConfig,
    layout: SceneLayout,
    models: TrainedModels | None = None,
    navgraph: NavGraph | None = None,
    departures: dict | None = None,
) -> Scenario:
    """One scenario of ``config.duration_frames`` frames from the configured engine.

    ``departures`` (if given) receives counts of agents that arrived, timed out,
    or were still walking when the run ended.
    """
    layout = apply_layout_overrides(config, layout)
    navgraph = navgraph or NavGraph(layout.traversable)
    adjust = agent_adjuster(config)
    count_rng = substream(config.seed, "count")
    emit_rng = substream(config.seed, "emit")
    if config.engine == "se-orca":
        prior = models.prior if models is not None else None
        return se_orca_generate(layout, navgraph, layout.population_prob, config.duration_frames, emit_rng, config.fps,
                                config.T_w, prior, scene_id=config.scene, count_rng=count_rng, adjust=adjust,
                                departures=departures)
    if models is None:
        raise MissingArtifactError("the crowdes engine needs trained checkpoints")
    sim = models.simulator
    cfg = dataclasses.replace(sim.config, fps=config.fps, ablations=tuple(sorted(set(sim.config.ablations) | set(config.ablate))))
    sim = dataclasses.replace(sim, config=cfg)
    state = SimState(cfg, config.fps)
    switch_rng = substream(config.seed, "switch")

    def emit(n, w):
        occ = occupancy_map(layout.spec, state.positions())
        specs, _ = emit_agents(models.emitter, layout, occ, n, w, emit_rng, navgraph)
        return adjust(specs)

    def step(w, n):
        step_window(state, sim, navgraph, layout, w, n, switch_rng)

    out = run_alternation(state, layout.population_prob, config.duration_frames, config.T_w, emit, step, count_rng,
                          True, config.scene)
    if departures is not None:
        departures.update(state.departure_counts())
    return out


def repetition_config(config: RunConfig, rep: int) -> RunConfig:
    seed = int(substream(config.seed, "eval", rep).integers(2 ** 31 - 1))
    return dataclasses.replace(config, seed=seed)


# --- rendering ----------------------------------------------------------------------

SEG_COLORS = ("#7f7f7f", "#a0522d", "#6b8e23", "#b5e08b", "#2e8b57", "#e8e4d8", "#505050")
KIND_COLORS = ("#1f77b4", "#d62728", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2")
PX_PER_M = 20.0


def render(scenario: Scenario, layout: SceneLayout | None = None) -> str:
    """SVG of the layout underlay with one polyline per agent plus spawn and goal markers."""
    if layout is not None:
        x0, y0, x1, y1 = layout.spec.extent
    elif len(scenario):
        lo, hi = scenario.bounds()
        x0, y0, x1, y1 = lo[0] - 1, lo[1] - 1, hi[0] + 1, hi[1] + 1
    else:
        x0, y0, x1, y1 = 0.0, 0.0, 1.0, 1.0
    W, H = (x1 - x0) * PX_PER_M, (y1 - y0) * PX_PER_M

    def px(p):
        return (p[0] - x0) * PX_PER_M, (y1 - p[1]) * PX_PER_M

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W:.1f}" height="{H:.1f}" viewBox="0 0 {W:.1f} {H:.1f}">',
        f"<title>{escape(scenario.scene_id)}</title>",
    ]
    if layout is not None:
        spec = layout.spec
        cs = spec.cell_size * PX_PER_M
        seg = np.asarray(layout.segmentation.values)
        parts.append('<g id="layout" stroke="none">')
        for iy in range(spec.height_cells):
            for ix in range(spec.width_cells):
                x, y = px(spec.cell_center((ix, iy)) + np.array([-0.5, 0.5]) * spec.cell_size)
                parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{cs:.1f}" height="{cs:.1f}" fill="{SEG_COLORS[seg[iy, ix]]}"/>')
        parts.append("</g>")
    parts.append('<g id="agents" fill="none" stroke-width="1.5">')
    for a in scenario.agents:
        color = KIND_COLORS[KINDS.index(a.kind)]
        pts = " ".join("{:.1f},{:.1f}".format(*px(p)) for p in a.trajectory)
        parts.append(f'<polyline class="agent" data-id="{a.id}" data-kind="{a.kind}" stroke="{color}" points="{pts}"/>')
    parts.append("</g>")
    parts.append('<g id="markers" stroke="none">')
    for a in scenario.agents:
        sx, sy = px(a.start)
        gx, gy = px(a.destination)
        parts.append(f'<circle class="spawn" cx="{sx:.1f}" cy="{sy:.1f}" r="3" fill="#2ca02c"/>')
        parts.append(f'<rect class="goal" x="{gx - 3:.1f}" y="{gy - 3:.1f}" width="6" height="6" fill="#000000"/>')
    parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"

