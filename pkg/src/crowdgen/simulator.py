"""State-switching crowd simulator: behavior transitions, segment decoding and rollout."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .emitter import AgentSpec, sample_population_count
from .layout import SEG_CLASSES, SceneLayout
from .navmesh import Polyline
from .nn import AdamW, MLP, NetSpec, Tape, build_mlp, load_checkpoint, save_checkpoint, spec_to_dict
from .trajectory import KIND_INDEX, KINDS, Agent, Scenario
from .vocab import BehaviorVocab, Frame, agent_path, assign_states, make_frame, segment_and_normalize, straight_line_path

log = logging.getLogger(__name__)

ABLATIONS = ("no-layout", "no-navmesh", "no-social", "no-switching")
CLIP = 10.0
Z_CLIP = 5.0
STD_FLOOR = 0.05


@dataclass
class SimConfig:
    T_f: int = 20
    T_h: int = 10
    fps: float = 5.0
    k_neighbors: int = 8
    neighbor_radius: float = 16.0
    crop_cells: int = 16
    crop_res: float = 1.0
    horizon: float | None = None  # seconds; defaults to T_f / fps
    arrival_radius: float = 1.0
    lifetime_factor: float = 4.0
    replan_distance: float = 1.0
    scale_by: str = "control"
    ablations: tuple = ()

    def __post_init__(self):
        self.ablations = tuple(self.ablations)
        unknown = set(self.ablations) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablations {sorted(unknown)}")

    @property
    def control_horizon(self) -> float:
        return self.T_f / self.fps if self.horizon is None else self.horizon

    @property
    def crop_channels(self) -> int:
        return len(SEG_CLASSES) + 1

    @property
    def feature_dim(self) -> int:
        return N_AGENT_FEATS + 2 + 2 * self.T_h + 4 * self.k_neighbors + self.crop_cells ** 2 * self.crop_channels


N_AGENT_FEATS = len(KINDS) + 1 + 2  # kind one-hot, pace, destination (canonical)


# --- features ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConditionFeatures:
    vector: np.ndarray
    frame: Frame


def crop_offsets(cfg: SimConfig) -> np.ndarray:
    c = (np.arange(cfg.crop_cells) + 0.5 - cfg.crop_cells / 2) * cfg.crop_res
    gx, gy = np.meshgrid(c, c)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def map_crop(layout: SceneLayout | None, frame: Frame, cfg: SimConfig, offsets: np.ndarray | None = None) -> np.ndarray:
    """Heading-aligned crop around the agent: segmentation one-hot and density channels."""
    n = cfg.crop_cells ** 2
    if layout is None:
        return np.zeros(n * cfg.crop_channels)
    off = crop_offsets(cfg) if offsets is None else offsets
    pts = off @ frame.rotation().T + frame.origin
    seg = layout.segmentation.sample(pts, fill=-1)
    onehot = (seg[:, None] == np.arange(len(SEG_CLASSES))[None, :]).astype(float)
    dens = layout.density.sample(pts, fill=0.0).astype(float)
    return np.concatenate([onehot, dens[:, None]], axis=1).T.ravel()


def feature_vector(
    cfg: SimConfig,
    frame: Frame,
    kind: str,
    pace: float,
    destination,
    ctrl,
    history: np.ndarray,
    neighbor_rel: np.ndarray,
    neighbor_vel: np.ndarray,
    crop: np.ndarray,
) -> np.ndarray:
    """Assemble one agent's condition vector in its canonical frame."""
    kind_oh = np.zeros(len(KINDS))
    kind_oh[KIND_INDEX[kind]] = 1.0
    dest = np.clip(frame.to_canonical(destination), -CLIP, CLIP)
    ctrl_rel = frame.rotate_to_canonical(np.asarray(ctrl, float) - frame.origin)
    hist = np.clip(frame.to_canonical(history), -CLIP, CLIP).ravel()
    nb = np.zeros((cfg.k_neighbors, 4))
    if "no-social" not in cfg.ablations and len(neighbor_rel):
        k = min(len(neighbor_rel), cfg.k_neighbors)
        nb[:k, :2] = frame.rotate_to_canonical(neighbor_rel[:k])
        nb[:k, 2:] = frame.rotate_to_canonical(neighbor_vel[:k])
    if "no-layout" in cfg.ablations:
        crop = np.zeros_like(crop)
    return np.concatenate([kind_oh, [pace], dest, ctrl_rel, hist, nb.ravel(), crop])


def select_neighbors(cfg: SimConfig, pos, others_pos, others_vel, own_vel):
    """k nearest other agents within the neighbor radius, sorted by distance."""
    if len(others_pos) == 0:
        return np.zeros((0, 2)), np.zeros((0, 2))
    rel = np.asarray(others_pos) - pos
    d = np.hypot(rel[:, 0], rel[:, 1])
    idx = np.flatnonzero(d <= cfg.neighbor_radius)
    idx = idx[np.argsort(d[idx], kind="stable")][: cfg.k_neighbors]
    return rel[idx], np.asarray(others_vel)[idx] - own_vel


def padded_history(track: np.ndarray, idx: int, T_h: int) -> np.ndarray:
    """Positions at ``idx - T_h .. idx - 1``, padded with the first position."""
    lo = idx - T_h
    if lo >= 0:
        return track[lo:idx]
    pad = np.repeat(track[:1], -lo, axis=0)
    return np.concatenate([pad, track[:idx]]) if idx > 0 else pad


def history_velocity(hist: np.ndarray, pos, cfg: SimConfig) -> np.ndarray:
    return (np.asarray(pos) - hist[0]) * (cfg.fps / cfg.T_h)


def control_for(path: Polyline | None, pos, dest, pace: float, cfg: SimConfig):
    if "no-navmesh" in cfg.ablations or path is None:
        path = straight_line_path(pos, dest)
    s, _ = path.project(pos)
    return path.point_at(s + pace * cfg.control_horizon)


def build_conditions(
    cfg: SimConfig,
    layout: SceneLayout | None,
    kind: str,
    pace: float,
    pos,
    destination,
    history: np.ndarray,
    path: Polyline | None,
    others_pos=(),
    others_vel=(),
    offsets: np.ndarray | None = None,
) -> ConditionFeatures:
    """Condition features of one live agent.

    ``history`` holds the ``T_h`` positions before ``pos`` (already padded);
    ``others_*`` are positions and history velocities of every other live agent.
    """
    pos = np.asarray(pos, float)
    ctrl = control_for(path, pos, destination, pace, cfg)
    frame = make_frame(pos, ctrl, history=np.vstack([history, pos]), scale_by=cfg.scale_by,
                       nominal=pace * cfg.control_horizon)
    own_vel = history_velocity(history, pos, cfg)
    rel, vel = select_neighbors(cfg, pos, np.asarray(others_pos, float).reshape(-1, 2),
                                np.asarray(others_vel, float).reshape(-1, 2), own_vel)
    crop = map_crop(layout, frame, cfg, offsets)
    return ConditionFeatures(feature_vector(cfg, frame, kind, pace, destination, ctrl, history, rel, vel, crop), frame)


# --- model -----------------------------------------------------------------------

@dataclass(eq=False)
class SimulatorModel:
    transition: MLP
    decoder: MLP
    vocab: BehaviorVocab
    feat_mean: np.ndarray
    feat_std: np.ndarray
    config: SimConfig
    transition_spec: NetSpec
    decoder_spec: NetSpec
    loss_log: list = field(default_factory=list)

    @property
    def B(self) -> int:
        return self.vocab.B

    def _inputs(self, feats: np.ndarray, states) -> np.ndarray:
        feats = np.atleast_2d(feats)
        z = np.clip((feats - self.feat_mean) / self.feat_std, -Z_CLIP, Z_CLIP)
        oh = np.zeros((len(feats), self.B))
        st = np.broadcast_to(np.asarray(states, dtype=np.int64), (len(feats),))
        valid = st >= 0
        oh[np.flatnonzero(valid), st[valid]] = 1.0
        return np.concatenate([z, oh], axis=1)

    def transition_probs(self, feats, b_h) -> np.ndarray:
        logits = self.transition(Tensor(self._inputs(feats, b_h))).data
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def decode_canonical(self, feats, b_f) -> np.ndarray:
        out = self.decoder(Tensor(self._inputs(feats, b_f))).data
        return out.reshape(len(out), self.vocab.T_f, 2)

    def save(self, path) -> None:
        arrays = {f"transition.{k}": v for k, v in self.transition.state().items()}
        arrays.update({f"decoder.{k}": v for k, v in self.decoder.state().items()})
        arrays["vocab.centers"] = self.vocab.centers
        arrays["feat.mean"] = self.feat_mean
        arrays["feat.std"] = self.feat_std
        header = {
            "model": "simulator",
            "config": asdict(self.config),
            "transition_spec": spec_to_dict(self.transition_spec),
            "decoder_spec": spec_to_dict(self.decoder_spec),
            "T_f": self.vocab.T_f,
        }
        save_checkpoint(path, arrays, header)

    @classmethod
    def load(cls, path) -> "SimulatorModel":
        arrays, meta = load_checkpoint(path)
        if meta.get("model") != "simulator":
            raise ValueError(f"{path}: not a simulator checkpoint")
        cfg = meta["config"]
        cfg["ablations"] = tuple(cfg["ablations"])
        config = SimConfig(**cfg)
        ts, ds = NetSpec(**meta["transition_spec"]), NetSpec(**meta["decoder_spec"])
        tr, de = build_mlp(ts), build_mlp(ds)
        tr.load_state({k[len("transition."):]: v for k, v in arrays.items() if k.startswith("transition.")})
        de.load_state({k[len("decoder."):]: v for k, v in arrays.items() if k.startswith("decoder.")})
        vocab = BehaviorVocab(arrays["vocab.centers"], int(meta["T_f"]))
        return cls(tr, de, vocab, arrays["feat.mean"], arrays["feat.std"], config, ts, ds)


def init_simulator(vocab: BehaviorVocab, cfg: SimConfig, width: int = 128, seed: int = 0,
                   feat_mean=None, feat_std=None) -> SimulatorModel:
    F = cfg.feature_dim
    ts = NetSpec("mlp", [F + vocab.B, width, width, vocab.B], "gelu", 1, seed)
    ds = NetSpec("mlp", [F + vocab.B, width, width, 2 * vocab.T_f], "gelu", 1, seed + 1)
    mean = np.zeros(F) if feat_mean is None else feat_mean
    std = np.ones(F) if feat_std is None else feat_std
    return SimulatorModel(build_mlp(ts), build_mlp(ds), vocab, mean, std, cfg, ts, ds)


def predict_transition(model: SimulatorModel, features, b_h: int | None) -> np.ndarray:
    """Categorical distribution over the next behavior state; ``b_h=None`` at an agent's first decision."""
    vec = features.vector if isinstance(features, ConditionFeatures) else features
    if b_h is not None and not 0 <= b_h < model.B:
        raise ValueError(f"state {b_h} outside 0..{model.B - 1}")
    return model.transition_probs(vec, -1 if b_h is None else b_h)[0]


def decode_segment(model: SimulatorModel, features: ConditionFeatures, b_f: int) -> np.ndarray:
    """``T_f`` world positions following the agent's current position for behavior ``b_f``."""
    if not 0 <= b_f < model.B:
        raise ValueError(f"state {b_f} outside 0..{model.B - 1}")
    canon = model.decode_canonical(features.vector, b_f)[0]
    return features.frame.to_world(canon)


# --- training data -------------------------------------------------------------------

@dataclass
class SimulatorDataset:
    features: np.ndarray  # (n, F)
    prev_state: np.ndarray  # (n,) -1 when there is no previous segment
    state: np.ndarray  # (n,)
    target: np.ndarray  # (n, 2*T_f) canonical coordinates

    def __len__(self):
        return len(self.state)


class _FrameIndex:
    """Per-frame positions and history velocities of every agent in a scenario."""

    def __init__(self, scenario, cfg: SimConfig):
        self.by_frame: dict[int, list[tuple[int, np.ndarray, np.ndarray]]] = {}
        for a in scenario.agents:
            tr = a.trajectory
            for i in range(len(tr)):
                hist0 = tr[max(i - cfg.T_h, 0)]
                vel = (tr[i] - hist0) * (cfg.fps / cfg.T_h)
                self.by_frame.setdefault(a.spawn_frame + i, []).append((a.id, tr[i], vel))

    def others(self, frame: int, agent_id: int):
        rows = [r for r in self.by_frame.get(frame, []) if r[0] != agent_id]
        if not rows:
            return np.zeros((0, 2)), np.zeros((0, 2))
        return np.array([r[1] for r in rows]), np.array([r[2] for r in rows])


def build_simulator_dataset(scenarios, layout, navgraph, vocab: BehaviorVocab, cfg: SimConfig,
                            segments=None, stride: int | None = None) -> SimulatorDataset:
    """Teacher-forcing examples: features at each segment origin, previous and ground-truth states.

    With ``stride < T_f`` origins overlap, which multiplies the examples drawn
    from short recordings; the previous state is then the one ``T_f`` frames earlier.
    """
    feats, prev, cur, tgt = [], [], [], []
    offsets = crop_offsets(cfg)
    for si, sc in enumerate(scenarios):
        segs = segments[si] if segments is not None else segment_and_normalize(
            sc, None if "no-navmesh" in cfg.ablations else navgraph, cfg.T_f, cfg.control_horizon, cfg.scale_by, stride)
        if not segs:
            continue
        states = assign_states(segs, vocab)
        agents = {a.id: a for a in sc.agents}
        index = _FrameIndex(sc, cfg)
        state_at: dict[tuple[int, int], int] = {}
        for seg, b in zip(segs, states):
            a = agents[seg.agent_id]
            i = seg.start_frame - a.spawn_frame
            pos = a.trajectory[i]
            hist = padded_history(a.trajectory, i, cfg.T_h)
            ctrl = seg.frame.to_world(np.array([1.0, 0.0])) if seg.frame.scale > 0 else pos
            opos, ovel = index.others(seg.start_frame, a.id)
            rel, vel = select_neighbors(cfg, pos, opos, ovel, history_velocity(hist, pos, cfg))
            crop = map_crop(layout, seg.frame, cfg, offsets)
            feats.append(feature_vector(cfg, seg.frame, a.kind, a.pace(sc.fps), a.destination, ctrl, hist, rel, vel, crop))
            prev.append(state_at.get((a.id, seg.start_frame - cfg.T_f), -1))
            state_at[(a.id, seg.start_frame)] = int(b)
            cur.append(int(b))
            tgt.append(seg.vector())
    if not feats:
        F = cfg.feature_dim
        return SimulatorDataset(np.zeros((0, F)), np.zeros(0, int), np.zeros(0, int), np.zeros((0, 2 * cfg.T_f)))
    return SimulatorDataset(np.array(feats), np.array(prev), np.array(cur), np.array(tgt))


def train_simulator(
    dataset: SimulatorDataset,
    vocab: BehaviorVocab,
    cfg: SimConfig | None = None,
    epochs: int = 64,
    batch: int = 2048,
    rng: np.random.Generator | None = None,
    lr: float = 1e-4,
    width: int = 128,
    seed: int = 0,
) -> SimulatorModel:
    """Teacher-forced training: cross-entropy for transitions, mean absolute error for segments."""
    if len(dataset) == 0:
        raise ValueError("simulator training needs at least one segment")
    cfg = cfg or SimConfig(T_f=vocab.T_f)
    rng = rng or np.random.default_rng(seed)
    mean = dataset.features.mean(axis=0)
    std = np.maximum(dataset.features.std(axis=0), STD_FLOOR)
    model = init_simulator(vocab, cfg, width, seed, mean, std)
    if epochs <= 0:
        return model
    X_prev = model._inputs(dataset.features, dataset.prev_state)
    X_cur = model._inputs(dataset.features, dataset.state)
    y = dataset.state
    T = dataset.target
    opt_t = AdamW(model.transition.params(), lr=lr)
    opt_d = AdamW(model.decoder.params(), lr=lr)
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        ce_sum = mae_sum = 0.0
        for s in range(0, n, batch):
            idx = order[s: s + batch]
            onehot = np.zeros((len(idx), vocab.B))
            onehot[np.arange(len(idx)), y[idx]] = 1.0
            with Tape() as tape:
                logp = ag.log_softmax(model.transition(Tensor(X_prev[idx])), axis=1)
                ce = ag.mul(ag.sum_(logp * onehot), -1.0 / len(idx))
            ag.backward(tape, 1.0, output=ce)
            opt_t.step()
            with Tape() as tape:
                pred = model.decoder(Tensor(X_cur[idx]))
                mae = ag.mean(ag.absolute(pred - T[idx]))
            ag.backward(tape, 1.0, output=mae)
            opt_d.step()
            ce_sum += float(ce.data) * len(idx)
            mae_sum += float(mae.data) * len(idx)
        model.loss_log.append((ce_sum / n, mae_sum / n))
        log.debug("simulator epoch %d ce %.4f mae %.4f", epoch, *model.loss_log[-1])
    return model


# --- rollout ---------------------------------------------------------------------

@dataclass(eq=False)
class LiveAgent:
    id: int
    spec: AgentSpec
    pos: np.ndarray
    track: list
    path: Polyline | None
    max_frames: int
    plan: deque = field(default_factory=deque)
    vel: np.ndarray = field(default_factory=lambda: np.zeros(2))
    state: int | None = None
    decisions: list = field(default_factory=list)  # frames at which the agent re-decided


@dataclass
class Departure:
    agent: Agent
    reason: str  # "arrived" | "timeout" | "end"


class SimState:
    """Live scene: pending spawns, active agents and finished tracks."""

    def __init__(self, cfg: SimConfig, fps: float):
        self.cfg = cfg
        self.fps = fps
        self.frame = 0
        self.pending: list[AgentSpec] = []
        self.live: dict[int, LiveAgent] = {}
        self.finished: list[Departure] = []
        self.next_id = 0

    def add_pending(self, specs):
        self.pending.extend(specs)
        self.pending.sort(key=lambda s: s.spawn_frame)

    def positions(self) -> np.ndarray:
        if not self.live:
            return np.zeros((0, 2))
        return np.array([a.pos for a in self.live.values()])

    def finish_all(self):
        for a in list(self.live.values()):
            self._depart(a, "end")

    def _depart(self, a: LiveAgent, reason: str):
        spawn = self.frame_of_first(a)
        self.finished.append(Departure(Agent(a.id, a.spec.kind, spawn, np.array(a.track)), reason))
        del self.live[a.id]

    @staticmethod
    def frame_of_first(a: LiveAgent) -> int:
        return a.spec.spawn_frame

    def agents(self) -> list[Agent]:
        return [d.agent for d in self.finished]

    def departure_counts(self) -> dict[str, int]:
        out = {"arrived": 0, "timeout": 0, "end": 0}
        for d in self.finished:
            out[d.reason] += 1
        return out


def _spawn(state: SimState, spec: AgentSpec, navgraph) -> LiveAgent:
    cfg = state.cfg
    start = np.asarray(spec.start, float)
    dest = np.asarray(spec.destination, float)
    path = None if "no-navmesh" in cfg.ablations else agent_path(navgraph, start, dest)
    length = path.length if path is not None else float(np.linalg.norm(dest - start))
    nominal = length / max(spec.pace, 1e-3) * state.fps
    max_frames = max(int(math.ceil(cfg.lifetime_factor * nominal)), 2 * cfg.T_f)
    a = LiveAgent(state.next_id, spec, start.copy(), [start.copy()], path, max_frames)
    state.next_id += 1
    state.live[a.id] = a
    return a


def _history(a: LiveAgent, T_h: int) -> np.ndarray:
    tr = a.track
    n = len(tr) - 1  # index of the current position
    if n >= T_h:
        return np.array(tr[n - T_h:n])
    pad = [tr[0]] * (T_h - n)
    return np.array(pad + tr[:n])


def _decide(state: SimState, model: SimulatorModel, navgraph, layout, deciders, rng, offsets):
    cfg = state.cfg
    live = list(state.live.values())
    pos_all = np.array([a.pos for a in live])
    vel_all = np.array([history_velocity(_history(a, cfg.T_h), a.pos, cfg) for a in live])
    index = {a.id: i for i, a in enumerate(live)}
    feats, frames = [], []
    for a in deciders:
        if a.path is not None:
            _, off = a.path.project(a.pos)
            if off > cfg.replan_distance:
                a.path = agent_path(navgraph, a.pos, a.spec.destination)
        mask = np.ones(len(live), dtype=bool)
        mask[index[a.id]] = False
        f = build_conditions(cfg, layout, a.spec.kind, a.spec.pace, a.pos, a.spec.destination,
                             _history(a, cfg.T_h), a.path, pos_all[mask], vel_all[mask], offsets)
        feats.append(f.vector)
        frames.append(f.frame)
    feats = np.array(feats)
    prev = np.array([-1 if a.state is None else a.state for a in deciders])
    probs = model.transition_probs(feats, prev)
    u = rng.random(len(deciders))
    choice = np.minimum((probs.cumsum(axis=1) < u[:, None]).sum(axis=1), model.B - 1)
    canon = model.decode_canonical(feats, choice)
    for a, fr, b, c in zip(deciders, frames, choice, canon):
        a.state = int(b)
        a.plan = deque(fr.to_world(c))
        a.decisions.append(state.frame)


def step_window(
    state: SimState,
    model: SimulatorModel,
    navgraph,
    layout: SceneLayout | None,
    window_start: int,
    T_w: int,
    rng: np.random.Generator,
    frame_limit: int | None = None,
) -> list[tuple[int, int, np.ndarray]]:
    """Advance frames ``window_start .. window_start + T_w - 1``.

    Returns the ``(frame, agent_id, xy)`` rows produced. Agents re-decide every
    ``T_f`` frames counted from their own spawn frame.
    """
    cfg = state.cfg
    offsets = crop_offsets(cfg)
    rows = []
    end = window_start + T_w if frame_limit is None else min(window_start + T_w, frame_limit)
    for t in range(window_start, end):
        state.frame = t
        for a in list(state.live.values()):
            nxt = a.plan.popleft() if a.plan else a.pos
            if navgraph is not None:
                c = navgraph.spec.world_to_cell(nxt)
                if not navgraph.is_free(int(c[0]), int(c[1])):
                    proj = navgraph.project(nxt, math.inf)
                    if proj is not None:
                        log.debug("agent %d re-projected onto walkable space at frame %d", a.id, t)
                        nxt = proj
            a.pos = np.asarray(nxt, float)
            a.track.append(a.pos.copy())
            rows.append((t, a.id, a.pos.copy()))
            if np.linalg.norm(a.pos - a.spec.destination) < cfg.arrival_radius:
                state._depart(a, "arrived")
            elif len(a.track) >= a.max_frames:
                state._depart(a, "timeout")
        while state.pending and state.pending[0].spawn_frame <= t:
            spec = state.pending.pop(0)
            if spec.spawn_frame < t:
                continue
            a = _spawn(state, spec, navgraph)
            rows.append((t, a.id, a.pos.copy()))
        deciders = [a for a in state.live.values() if not a.plan]
        if deciders:
            _decide(state, model, navgraph, layout, deciders, rng, offsets)
    state.frame = end
    return rows


def crop_warmup(agents, offset: int, total_frames: int) -> list[Agent]:
    """Drop frames before ``offset`` and shift the rest so ``offset`` becomes frame 0."""
    out = []
    for a in agents:
        if a.end_frame < offset:
            continue
        lo = max(0, offset - a.spawn_frame)
        tr = a.trajectory[lo:]
        tr = tr[: max(0, total_frames - (max(a.spawn_frame, offset) - offset))]
        if len(tr):
            out.append(Agent(a.id, a.kind, max(a.spawn_frame, offset) - offset, tr))
    return out


def run_alternation(
    state: SimState,
    P,
    duration: int,
    T_w: int,
    emit,
    step,
    rng: np.random.Generator,
    warmup: bool = True,
    scene_id: str = "scene",
) -> Scenario:
    """Alternate emission and simulation window by window.

    ``emit(count, window_start)`` returns new agent specs; ``step(window_start, n_frames)``
    advances the shared ``state``. With ``warmup`` an extra leading window is
    simulated with half the sampled population and then cut away.
    """
    if duration < 0:
        raise ValueError("duration must be non-negative")
    if duration == 0:
        return Scenario(state.fps, 0, (), scene_id)
    offset = T_w if warmup else 0
    total = duration + offset
    for w in range(0, total, T_w):
        n = sample_population_count(P, len(state.live), rng)
        if warmup and w == 0:
            n = math.ceil(n / 2)
        n_frames = min(T_w, total - w)
        specs = [s for s in emit(n, w) if s.spawn_frame < w + n_frames]
        state.add_pending(specs)
        step(w, n_frames)
    state.finish_all()
    return Scenario(state.fps, duration, tuple(crop_warmup(state.agents(), offset, duration)), scene_id)
