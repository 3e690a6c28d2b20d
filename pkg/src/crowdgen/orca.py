"""Surface emitter plus ORCA reciprocal collision avoidance: the algorithmic baseline engine."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .emitter import AgentPrior, histogram_emit
from .layout import SceneLayout
from .simulator import SimConfig, SimState, _spawn, run_alternation
from .trajectory import Scenario
from .vocab import straight_line_path

AGENT_RADIUS = 0.2
TIME_HORIZON = 2.0
SPEED_FACTOR = 1.5
EPS = 1e-9


@dataclass
class OrcaAgent:
    position: np.ndarray
    velocity: np.ndarray
    pref_velocity: np.ndarray
    pace: float
    radius: float = AGENT_RADIUS

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("agent radius must be positive")
        self.position = np.asarray(self.position, float)
        self.velocity = np.asarray(self.velocity, float)
        self.pref_velocity = np.asarray(self.pref_velocity, float)

    @property
    def max_speed(self) -> float:
        return SPEED_FACTOR * self.pace


def _det(a, b) -> float:
    return a[0] * b[1] - a[1] * b[0]


# Half-plane lines are (point, direction); admissible velocities lie to the left of direction.

def _lp1(lines, no: int, radius: float, opt, direction_opt: bool):
    point, direction = lines[no]
    dot = point @ direction
    disc = dot * dot + radius * radius - point @ point
    if disc < 0.0:
        return None
    sq = math.sqrt(disc)
    t_left, t_right = -dot - sq, -dot + sq
    for i in range(no):
        p_i, d_i = lines[i]
        denom = _det(direction, d_i)
        numer = _det(d_i, point - p_i)
        if abs(denom) <= EPS:
            if numer < 0.0:
                return None
            continue
        t = numer / denom
        if denom >= 0.0:
            t_right = min(t_right, t)
        else:
            t_left = max(t_left, t)
        if t_left > t_right:
            return None
    if direction_opt:
        t = t_right if opt @ direction > 0.0 else t_left
    else:
        t = min(max(direction @ (opt - point), t_left), t_right)
    return point + t * direction


def _lp2(lines, radius: float, opt, direction_opt: bool):
    if direction_opt:
        result = opt * radius
    elif opt @ opt > radius * radius:
        result = opt / np.linalg.norm(opt) * radius
    else:
        result = opt.copy()
    for i, (p, d) in enumerate(lines):
        if _det(d, p - result) > 0.0:
            new = _lp1(lines, i, radius, opt, direction_opt)
            if new is None:
                return i, result
            result = new
    return len(lines), result


def _lp3(lines, begin: int, radius: float, result):
    """Minimize the maximum violation once the 2-D program is infeasible."""
    distance = 0.0
    for i in range(begin, len(lines)):
        p_i, d_i = lines[i]
        if _det(d_i, p_i - result) > distance:
            proj = []
            for j in range(i):
                p_j, d_j = lines[j]
                det = _det(d_i, d_j)
                if abs(det) <= EPS:
                    if d_i @ d_j > 0.0:
                        continue
                    point = 0.5 * (p_i + p_j)
                else:
                    point = p_i + (_det(d_j, p_i - p_j) / det) * d_i
                direction = d_j - d_i
                direction = direction / np.linalg.norm(direction)
                proj.append((point, direction))
            fail, candidate = _lp2(proj, radius, np.array([-d_i[1], d_i[0]]), True)
            if fail == len(proj):
                result = candidate
            distance = _det(d_i, p_i - result)
    return result


def orca_lines(agent: OrcaAgent, neighbors, time_horizon: float = TIME_HORIZON, dt: float = 0.2):
    lines = []
    inv_th = 1.0 / time_horizon
    for other in neighbors:
        rel_pos = other.position - agent.position
        rel_vel = agent.velocity - other.velocity
        dist_sq = rel_pos @ rel_pos
        r = agent.radius + other.radius
        r_sq = r * r
        if dist_sq > r_sq:
            w = rel_vel - inv_th * rel_pos
            w_len_sq = w @ w
            dot1 = w @ rel_pos
            if dot1 < 0.0 and dot1 * dot1 > r_sq * w_len_sq:
                # projection onto the truncation circle
                w_len = math.sqrt(w_len_sq)
                unit_w = w / w_len
                direction = np.array([unit_w[1], -unit_w[0]])
                u = (r * inv_th - w_len) * unit_w
            else:
                leg = math.sqrt(dist_sq - r_sq)
                if _det(rel_pos, w) > 0.0:
                    direction = np.array([rel_pos[0] * leg - rel_pos[1] * r, rel_pos[0] * r + rel_pos[1] * leg]) / dist_sq
                else:
                    direction = -np.array([rel_pos[0] * leg + rel_pos[1] * r, -rel_pos[0] * r + rel_pos[1] * leg]) / dist_sq
                u = (rel_vel @ direction) * direction - rel_vel
        else:
            # already overlapping: resolve within one step
            inv_dt = 1.0 / dt
            w = rel_vel - inv_dt * rel_pos
            w_len = math.sqrt(w @ w)
            unit_w = w / w_len if w_len > 0 else np.array([1.0, 0.0])
            direction = np.array([unit_w[1], -unit_w[0]])
            u = (r * inv_dt - w_len) * unit_w
        lines.append((agent.velocity + 0.5 * u, direction))
    return lines


def orca_velocity(agent: OrcaAgent, neighbors, time_horizon: float = TIME_HORIZON, dt: float = 0.2) -> np.ndarray:
    """Collision-free velocity closest to the preferred one, capped at the agent's max speed."""
    lines = orca_lines(agent, neighbors, time_horizon, dt)
    fail, result = _lp2(lines, agent.max_speed, agent.pref_velocity, False)
    if fail < len(lines):
        result = _lp3(lines, fail, agent.max_speed, result)
    speed = np.linalg.norm(result)
    if speed > agent.max_speed:
        result = result * (agent.max_speed / speed)
    return result


@dataclass
class OrcaConfig:
    time_horizon: float = TIME_HORIZON
    neighbor_dist: float = 5.0
    max_neighbors: int = 10
    lookahead: float = 1.0  # seconds of path ahead used as the steering target
    radius: float = AGENT_RADIUS


def orca_step_window(state: SimState, navgraph, window_start: int, T_w: int, ocfg: OrcaConfig | None = None):
    """Advance an ORCA crowd frame by frame with the simulator's spawn and departure rules."""
    ocfg = ocfg or OrcaConfig()
    cfg = state.cfg
    dt = 1.0 / state.fps
    rows = []
    for t in range(window_start, window_start + T_w):
        state.frame = t
        live = list(state.live.values())
        if live:
            pos = np.array([a.pos for a in live])
            agents = []
            for a in live:
                path = a.path if a.path is not None else straight_line_path(a.pos, a.spec.destination)
                s, _ = path.project(a.pos)
                target = path.point_at(s + max(a.spec.pace * ocfg.lookahead, 1e-6))
                to = target - a.pos
                d = np.linalg.norm(to)
                remaining = np.linalg.norm(a.spec.destination - a.pos)
                speed = min(a.spec.pace, remaining / dt)
                pref = to / d * speed if d > 1e-9 else np.zeros(2)
                agents.append(OrcaAgent(a.pos, a.vel, pref, a.spec.pace, ocfg.radius))
            new_vel = []
            for i, ag_i in enumerate(agents):
                d = np.linalg.norm(pos - pos[i], axis=1)
                d[i] = np.inf
                near = np.argsort(d, kind="stable")[: ocfg.max_neighbors]
                near = [j for j in near if d[j] < ocfg.neighbor_dist]
                new_vel.append(orca_velocity(ag_i, [agents[j] for j in near], ocfg.time_horizon, dt))
            for a, v in zip(live, new_vel):
                a.vel = v
                a.pos = a.pos + v * dt
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
    state.frame = window_start + T_w
    return rows


def orca_rollout(specs, navgraph, duration: int, fps: float = 5.0, scene_id: str = "scene",
                 cfg: SimConfig | None = None, ocfg: OrcaConfig | None = None,
                 arrived_only: bool = False) -> Scenario:
    """Simulate a fixed list of agents with ORCA for ``duration`` frames.

    ``arrived_only`` keeps just the agents that reached their destination in time.
    """
    state = SimState(cfg or SimConfig(fps=fps), fps)
    state.add_pending(specs)
    orca_step_window(state, navgraph, 0, duration, ocfg)
    state.finish_all()
    kept = [d.agent for d in state.finished if d.reason == "arrived" or not arrived_only]
    return Scenario(fps, duration, tuple(kept), scene_id)


def se_orca_generate(
    layout: SceneLayout,
    navgraph,
    P,
    duration: int,
    rng: np.random.Generator,
    fps: float = 5.0,
    T_w: int = 50,
    prior: AgentPrior | None = None,
    warmup: bool = True,
    scene_id: str = "scene",
    ocfg: OrcaConfig | None = None,
    count_rng: np.random.Generator | None = None,
    adjust=None,
    departures: dict | None = None,
) -> Scenario:
    """Baseline generation: histogram surface emitter, navmesh pursuit and ORCA avoidance.

    ``adjust`` may rewrite each window's emitted specs (user overrides);
    ``departures`` receives counts per departure reason.
    """
    state = SimState(SimConfig(fps=fps), fps)
    ocfg = ocfg or OrcaConfig()

    def emit(n, w):
        specs = histogram_emit(layout, n, w, rng, prior, T_w)
        return adjust(specs) if adjust else specs

    def step(w, n):
        orca_step_window(state, navgraph, w, n, ocfg)

    out = run_alternation(state, P, duration, T_w, emit, step, count_rng or rng, warmup, scene_id)
    if departures is not None:
        departures.update(state.departure_counts())
    return out
