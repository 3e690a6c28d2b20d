"""Crowd emitter: population-count sampling and DDIM diffusion over agent parameter sets."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layout import SEG_CLASSES, SceneLayout, occupancy_map
from .nn import (
    AdamW,
    Linear,
    MLP,
    Module,
    NetSpec,
    SetAttentionBlock,
    Tape,
    load_checkpoint,
    save_checkpoint,
    spec_to_dict,
)
from .trajectory import KIND_INDEX, KINDS, window_scenario

log = logging.getLogger(__name__)

N_KINDS = len(KINDS)
PARAM_DIM = N_KINDS + 1 + 1 + 2 + 2  # kind logits, pace, spawn offset, start, destination
CONTEXT_GRID = 16
TIME_EMB = 16
MAX_TOKENS = 32
PROJECTION_RADIUS = 2.0
MIN_PACE = 0.1


# --- population count ----------------------------------------------------------

def sample_population_count(P, n_prev: int, rng: np.random.Generator) -> int:
    """Draw a target population from ``P`` and return how many agents must be added."""
    P = np.asarray(P, dtype=float)
    n_target = int(rng.choice(len(P), p=P / P.sum()))
    return max(n_target - int(n_prev), 0)


# --- noise schedule -------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    @classmethod
    def linear(cls, M: int = 50, beta_start: float | None = None, beta_end: float | None = None) -> "NoiseSchedule":
        """Linear betas; the defaults stretch the usual 1e-4..0.02 over 1000 steps onto ``M`` steps
        so that ``alpha_bar[M]`` ends near zero even for short chains."""
        scale = 1000.0 / M
        beta_start = 1e-4 * scale if beta_start is None else beta_start
        beta_end = min(0.02 * scale, 0.999) if beta_end is None else beta_end
        return cls(np.linspace(beta_start, beta_end, M))

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=float)
        if b.ndim != 1 or len(b) == 0 or np.any(b <= 0) or np.any(b >= 1) or np.any(np.diff(b) <= 0):
            raise ValueError("betas must be increasing and inside (0, 1)")
        object.__setattr__(self, "betas", b)

    @property
    def M(self) -> int:
        return len(self.betas)

    @property
    def alpha_bar(self) -> np.ndarray:
        """``alpha_bar[m]`` for ``m = 0..M`` with ``alpha_bar[0] = 1``."""
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])


def forward_diffuse(alpha0, m: int, rng: np.random.Generator, schedule: NoiseSchedule | None = None):
    """Sample ``alpha^m`` from the closed-form marginal ``q(alpha^m | alpha^0)``."""
    schedule = schedule or NoiseSchedule.linear()
    if not 1 <= m <= schedule.M:
        raise ValueError(f"diffusion step {m} outside 1..{schedule.M}")
    a0 = np.asarray(alpha0, dtype=float)
    ab = schedule.alpha_bar[m]
    return math.sqrt(ab) * a0 + math.sqrt(1.0 - ab) * rng.standard_normal(a0.shape)


def ddim_update(x, eps_hat, m: int, schedule: NoiseSchedule, x0_range=None):
    """Deterministic DDIM map from step ``m`` to ``m - 1``.

    With ``x0_range=(lo, hi)`` the implied clean sample is clipped to that box and
    the noise estimate is made consistent with the clipped value.
    """
    ab = schedule.alpha_bar
    x0 = (x - math.sqrt(1.0 - ab[m]) * eps_hat) / math.sqrt(ab[m])
    if x0_range is not None:
        x0 = np.clip(x0, x0_range[0], x0_range[1])
        eps_hat = (x - math.sqrt(ab[m]) * x0) / math.sqrt(1.0 - ab[m])
    return math.sqrt(ab[m - 1]) * x0 + math.sqrt(1.0 - ab[m - 1]) * eps_hat


def timestep_embedding(m, dim: int = TIME_EMB) -> np.ndarray:
    m = np.atleast_1d(np.asarray(m, dtype=float))
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / half)
    ang = m[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# --- condition encoding ------------------------------------------------------------

def _block_mean(values: np.ndarray, grid: int) -> np.ndarray:
    H, W = values.shape
    by = np.minimum((np.arange(H) * grid) // H, grid - 1)
    bx = np.minimum((np.arange(W) * grid) // W, grid - 1)
    sums = np.zeros((grid, grid))
    counts = np.zeros((grid, grid))
    np.add.at(sums, (by[:, None], bx[None, :]), values)
    np.add.at(counts, (by[:, None], bx[None, :]), 1.0)
    return sums / np.maximum(counts, 1.0)


def static_context(layout: SceneLayout, grid: int = CONTEXT_GRID) -> np.ndarray:
    """Per-coarse-cell class fractions, appearance, density, traversability and position: ``(grid*grid, C)``."""
    seg = np.asarray(layout.segmentation.values)
    chans = [_block_mean((seg == c).astype(float), grid) for c in range(len(SEG_CLASSES))]
    chans.append(_block_mean(np.asarray(layout.appearance.values, float), grid))
    chans.append(_block_mean(np.asarray(layout.density.values, float), grid))
    chans.append(_block_mean(np.asarray(layout.traversable.values, float), grid))
    pos = (np.arange(grid) + 0.5) / grid * 2.0 - 1.0
    px, py = np.meshgrid(pos, pos)
    chans += [px, py, np.sin(math.pi * px), np.sin(math.pi * py)]
    return np.stack([c.ravel() for c in chans], axis=1)


def encode_conditions(layout: SceneLayout, occupancy, static: np.ndarray | None = None, grid: int = CONTEXT_GRID) -> np.ndarray:
    """Context tokens for the denoiser: the static layout channels plus the occupancy map."""
    static = static_context(layout, grid) if static is None else static
    occ = _block_mean(np.asarray(occupancy.values if hasattr(occupancy, "values") else occupancy, float), grid)
    return np.concatenate([static, occ.reshape(-1, 1)], axis=1)


CONTEXT_DIM = len(SEG_CLASSES) + 3 + 4 + 1


# --- parameter encoding -----------------------------------------------------------

@dataclass
class AgentSpec:
    """Decoded agent parameters; trajectories come later from the simulator."""

    kind: str
    pace: float
    spawn_frame: int
    start: np.ndarray
    destination: np.ndarray


@dataclass
class ParamStats:
    lo: np.ndarray  # scene bounds used to map coordinates to [-1, 1]
    hi: np.ndarray
    mean: np.ndarray  # z-score stats of the 6 continuous dims
    std: np.ndarray
    pace_min: float
    pace_max: float
    x_min: np.ndarray | None = None  # per-dimension range of encoded training data
    x_max: np.ndarray | None = None

    def to_unit(self, xy):
        return (np.asarray(xy, float) - self.lo) / (self.hi - self.lo) * 2.0 - 1.0

    def from_unit(self, u):
        return (np.asarray(u, float) + 1.0) * 0.5 * (self.hi - self.lo) + self.lo

    def encode(self, kind_idx, pace, offset, start, dest) -> np.ndarray:
        n = len(kind_idx)
        out = np.empty((n, PARAM_DIM))
        out[:, :N_KINDS] = -1.0
        out[np.arange(n), np.asarray(kind_idx, int)] = 1.0
        cont = np.column_stack([pace, offset, self.to_unit(start), self.to_unit(dest)])
        out[:, N_KINDS:] = (cont - self.mean) / self.std
        return out

    def decode(self, x: np.ndarray):
        kinds = np.argmax(x[:, :N_KINDS], axis=1)
        cont = x[:, N_KINDS:] * self.std + self.mean
        pace = np.clip(cont[:, 0], self.pace_min, self.pace_max)
        offset = np.clip(cont[:, 1], 0.0, np.nextafter(1.0, 0.0))
        start = np.clip(self.from_unit(cont[:, 2:4]), self.lo, self.hi)
        dest = np.clip(self.from_unit(cont[:, 4:6]), self.lo, self.hi)
        return kinds, pace, offset, start, dest

    def as_arrays(self) -> dict:
        out = {
            "stats.lo": self.lo, "stats.hi": self.hi, "stats.mean": self.mean, "stats.std": self.std,
            "stats.pace_range": np.array([self.pace_min, self.pace_max]),
        }
        if self.x_min is not None:
            out["stats.x_range"] = np.stack([self.x_min, self.x_max])
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "ParamStats":
        pr = arrays["stats.pace_range"]
        xr = arrays.get("stats.x_range")
        return cls(arrays["stats.lo"], arrays["stats.hi"], arrays["stats.mean"], arrays["stats.std"],
                   float(pr[0]), float(pr[1]), None if xr is None else xr[0], None if xr is None else xr[1])


# --- denoiser ---------------------------------------------------------------------

class Denoiser(Module):
    """Noise predictor over a set of agent-parameter tokens with cross-attention to layout context."""

    def __init__(self, spec: NetSpec):
        rng = np.random.default_rng(spec.seed)
        d = int(spec.extra.get("token_dim", 64))
        blocks = int(spec.extra.get("blocks", 2))
        head_w = int(spec.extra.get("head_width", 128))
        self.embed = Linear(PARAM_DIM, d, rng)
        self.temb = Linear(TIME_EMB, d, rng)
        self.ctx = Linear(CONTEXT_DIM, d, rng)
        self.blocks = [SetAttentionBlock(d, spec.heads, head_w, spec.activation, rng) for _ in range(blocks)]
        self.head = MLP([d, head_w, head_w, PARAM_DIM], spec.activation, rng)
        self.n_in = PARAM_DIM
        self._name_params()

    def __call__(self, x: Tensor, temb: Tensor, ctx: Tensor, mask=None) -> Tensor:
        # x: (..., n, P); temb: (..., 1, TIME_EMB); ctx: (..., K, C)
        h = self.embed(x) + self.temb(temb)
        c = self.ctx(ctx)
        for blk in self.blocks:
            h = blk(h, c, mask)
        return self.head(h)


def default_denoiser_spec(seed: int = 0) -> NetSpec:
    return NetSpec(kind="denoiser", widths=[PARAM_DIM, 64, PARAM_DIM], activation="gelu", heads=4, seed=seed,
                   extra={"token_dim": 64, "blocks": 2, "head_width": 128})


@dataclass(eq=False)
class EmitterModel:
    denoiser: Denoiser
    schedule: NoiseSchedule
    stats: ParamStats
    spec: NetSpec
    T_w: int = 50
    loss_log: list = field(default_factory=list)

    def predict_noise(self, x: np.ndarray, m: int, ctx: np.ndarray) -> np.ndarray:
        temb = timestep_embedding(m)
        return self.denoiser(Tensor(x), Tensor(temb), Tensor(ctx)).data

    def save(self, path) -> None:
        arrays = self.denoiser.state()
        arrays.update(self.stats.as_arrays())
        arrays["schedule.betas"] = self.schedule.betas
        save_checkpoint(path, arrays, {"model": "emitter", "spec": spec_to_dict(self.spec), "T_w": self.T_w})

    @classmethod
    def load(cls, path) -> "EmitterModel":
        arrays, meta = load_checkpoint(path)
        if meta.get("model") != "emitter":
            raise ValueError(f"{path}: not an emitter checkpoint")
        spec = NetSpec(**meta["spec"])
        net = Denoiser(spec)
        net.load_state(arrays)
        return cls(net, NoiseSchedule(arrays["schedule.betas"]), ParamStats.from_arrays(arrays), spec, int(meta["T_w"]))


def denoise_step(model: EmitterModel, x, m: int, ctx) -> np.ndarray:
    """One deterministic DDIM step of the whole agent set from ``m`` to ``m - 1``."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] == 0:
        return x.copy()
    eps = model.predict_noise(x, m, ctx)
    st = model.stats
    rng_box = None if st.x_min is None else (st.x_min, st.x_max)
    return ddim_update(x, eps, m, model.schedule, rng_box)


def sample_params(model: EmitterModel, ctx, count: int, rng: np.random.Generator) -> np.ndarray:
    x = rng.standard_normal((count, PARAM_DIM))
    if count == 0:
        return x
    for m in range(model.schedule.M, 0, -1):
        x = denoise_step(model, x, m, ctx)
    return x


def emit_agents(
    model: EmitterModel,
    layout: SceneLayout,
    occupancy,
    count: int,
    window_start: int,
    rng: np.random.Generator,
    navgraph=None,
    static: np.ndarray | None = None,
) -> tuple[list[AgentSpec], int]:
    """Run the reverse chain for ``count`` agents and decode them.

    Returns the emitted agents and the number dropped because no traversable
    cell lies within 2 m of their start or destination.
    """
    if count <= 0:
        return [], 0
    ctx = encode_conditions(layout, occupancy, static)
    x = sample_params(model, ctx, count, rng)
    kinds, pace, offset, start, dest = model.stats.decode(x)
    out, dropped = [], 0
    for i in range(count):
        s, d = start[i], dest[i]
        if navgraph is not None:
            s = navgraph.project(s, PROJECTION_RADIUS)
            d = navgraph.project(d, PROJECTION_RADIUS)
        if s is None or d is None:
            dropped += 1
            continue
        frame = window_start + min(int(round(offset[i] * model.T_w)), model.T_w - 1)
        out.append(AgentSpec(KINDS[kinds[i]], float(pace[i]), frame, np.asarray(s, float), np.asarray(d, float)))
    if dropped:
        log.warning("emitter dropped %d of %d agents with no walkable cell within %.1f m", dropped, count, PROJECTION_RADIUS)
    return out, dropped


# --- training ---------------------------------------------------------------------

@dataclass
class EmitterExample:
    params: np.ndarray  # (n, PARAM_DIM) encoded
    context: np.ndarray  # (K, CONTEXT_DIM)


def is_complete(agent, scenario) -> bool:
    """True unless the agent touches the first or last frame of its recording."""
    return agent.spawn_frame > 0 and agent.end_frame < scenario.total_frames - 1


def fit_param_stats(scenarios, layout: SceneLayout, T_w: int = 50) -> ParamStats:
    lo, hi = layout.bounds()
    rows, kinds = [], []
    for sc in scenarios:
        for a in sc.agents:
            if not is_complete(a, sc):
                continue
            rows.append((a.pace(sc.fps), (a.spawn_frame % T_w) / T_w, *a.start, *a.destination))
            kinds.append(KIND_INDEX[a.kind])
    if not rows:
        raise ValueError("no agents to fit emitter statistics")
    rows = np.array(rows)
    unit = np.column_stack([rows[:, :2], (rows[:, 2:4] - lo) / (hi - lo) * 2 - 1, (rows[:, 4:6] - lo) / (hi - lo) * 2 - 1])
    stats = ParamStats(lo, hi, unit.mean(axis=0), np.maximum(unit.std(axis=0), 0.05),
                       max(MIN_PACE, float(rows[:, 0].min())), max(MIN_PACE, float(rows[:, 0].max())))
    enc = stats.encode(kinds, rows[:, 0], rows[:, 1], rows[:, 2:4], rows[:, 4:6])
    stats.x_min, stats.x_max = enc.min(axis=0), enc.max(axis=0)
    stats.x_min[:N_KINDS], stats.x_max[:N_KINDS] = -1.0, 1.0
    return stats


def build_emitter_dataset(scenarios, layout: SceneLayout, stats: ParamStats, T_w: int = 50,
                          rng: np.random.Generator | None = None, stride: int | None = None) -> list[EmitterExample]:
    """One example per window with at least one spawn; conditions use the previous frame's occupancy.

    Agents cut by the recording boundaries (present in the first frame or still
    present in the last) have no observed spawn or destination, so they only
    contribute occupancy. ``stride`` below ``T_w`` adds shifted window tilings.
    """
    rng = rng or np.random.default_rng(0)
    static = static_context(layout)
    out = []
    stride = T_w if stride is None else int(stride)
    windows = [(sc, w) for sc in scenarios for off in range(0, T_w, stride) for w in window_scenario(sc, T_w, off)]
    for sc, w in windows:
        agents = [a for a in w.spawned if is_complete(a, sc)]
        if not agents:
            continue
        if len(agents) > MAX_TOKENS:
            keep = np.sort(rng.choice(len(agents), MAX_TOKENS, replace=False))
            agents = [agents[i] for i in keep]
        prev = [a.position_at(w.start - 1) for a in w.alive_before]
        occ = occupancy_map(layout.spec, np.array(prev) if prev else np.zeros((0, 2)))
        params = stats.encode(
            [KIND_INDEX[a.kind] for a in agents],
            [a.pace(sc.fps) for a in agents],
            [(a.spawn_frame - w.start) / T_w for a in agents],
            np.array([a.start for a in agents]),
            np.array([a.destination for a in agents]),
        )
        out.append(EmitterExample(params, encode_conditions(layout, occ, static)))
    return out


def _pad_batch(examples):
    n = max(len(e.params) for e in examples)
    B = len(examples)
    x = np.zeros((B, n, PARAM_DIM))
    mask = np.zeros((B, n), dtype=bool)
    for i, e in enumerate(examples):
        x[i, : len(e.params)] = e.params
        mask[i, : len(e.params)] = True
    ctx = np.stack([e.context for e in examples])
    return x, mask, ctx


def train_emitter(
    dataset: list[EmitterExample],
    stats: ParamStats,
    epochs: int = 256,
    batch: int = 512,
    rng: np.random.Generator | None = None,
    lr: float = 1e-4,
    schedule: NoiseSchedule | None = None,
    spec: NetSpec | None = None,
    T_w: int = 50,
) -> EmitterModel:
    """Fit the noise predictor with masked MSE on randomly noised agent sets."""
    if not dataset:
        raise ValueError("emitter training needs at least one window with a spawned agent")
    rng = rng or np.random.default_rng(0)
    schedule = schedule or NoiseSchedule.linear()
    spec = spec or default_denoiser_spec()
    net = Denoiser(spec)
    model = EmitterModel(net, schedule, stats, spec, T_w)
    if epochs <= 0:
        return model
    opt = AdamW(net.params(), lr=lr)
    ab = schedule.alpha_bar
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        total, n_batches = 0.0, 0
        for s in range(0, len(order), batch):
            x0, mask, ctx = _pad_batch([dataset[i] for i in order[s: s + batch]])
            m = rng.integers(1, schedule.M + 1, size=len(x0))
            eps = rng.standard_normal(x0.shape)
            sa = np.sqrt(ab[m])[:, None, None]
            sb = np.sqrt(1.0 - ab[m])[:, None, None]
            xm = sa * x0 + sb * eps
            temb = timestep_embedding(m)[:, None, :]
            w = mask[..., None].astype(float) / (mask.sum() * PARAM_DIM)
            with Tape() as tape:
                pred = net(Tensor(xm), Tensor(temb), Tensor(ctx), mask)
                loss = ag.sum_(ag.square(pred - eps) * w)
            ag.backward(tape, 1.0, output=loss)
            opt.step()
            total += float(loss.data)
            n_batches += 1
        model.loss_log.append(total / n_batches)
        log.debug("emitter epoch %d loss %.5f", epoch, model.loss_log[-1])
    return model


# --- non-neural emitter -------------------------------------------------------------

@dataclass
class AgentPrior:
    """Empirical pace samples and kind frequencies from training data."""

    paces: np.ndarray = field(default_factory=lambda: np.array([1.2]))
    kind_probs: np.ndarray = field(default_factory=lambda: np.eye(N_KINDS)[0])

    @classmethod
    def from_scenarios(cls, scenarios) -> "AgentPrior":
        paces, counts = [], np.zeros(N_KINDS)
        for sc in scenarios:
            for a in sc.agents:
                p = a.pace(sc.fps)
                if p >= MIN_PACE:
                    paces.append(p)
                counts[KIND_INDEX[a.kind]] += 1
        if not paces:
            return cls()
        return cls(np.array(paces), counts / counts.sum())


def _sample_in_cells(spec, weights: np.ndarray, n: int, rng) -> np.ndarray:
    flat = weights.ravel().astype(float)
    idx = rng.choice(flat.size, size=n, p=flat / flat.sum())
    iy, ix = np.divmod(idx, spec.width_cells)
    jitter = rng.random((n, 2))
    return np.asarray(spec.origin) + (np.column_stack([ix, iy]) + jitter) * spec.cell_size


def histogram_emit(
    layout: SceneLayout,
    count: int,
    window_start: int,
    rng: np.random.Generator,
    prior: AgentPrior | None = None,
    T_w: int = 50,
    min_trip: float = 2.0,
) -> list[AgentSpec]:
    """Surface emitter: starts and destinations drawn in proportion to appearance-map mass.

    Destinations closer than ``min_trip`` meters to the start are redrawn a few times.
    An all-zero appearance map falls back to uniform sampling over traversable cells.
    """
    if count <= 0:
        return []
    prior = prior or AgentPrior()
    weights = np.asarray(layout.appearance.values, float)
    if weights.sum() <= 0:
        weights = np.asarray(layout.traversable.values, float)
    if weights.sum() <= 0:
        raise ValueError("no appearance mass and no traversable cells to emit from")
    spec = layout.spec
    starts = _sample_in_cells(spec, weights, count, rng)
    dests = _sample_in_cells(spec, weights, count, rng)
    for _ in range(20):
        short = np.linalg.norm(dests - starts, axis=1) < min_trip
        if not short.any():
            break
        dests[short] = _sample_in_cells(spec, weights, int(short.sum()), rng)
    paces = rng.choice(prior.paces, size=count)
    kinds = rng.choice(N_KINDS, size=count, p=prior.kind_probs)
    frames = window_start + rng.integers(0, T_w, size=count)
    return [AgentSpec(KINDS[k], float(p), int(f), s, d) for k, p, f, s, d in zip(kinds, paces, frames, starts, dests)]
