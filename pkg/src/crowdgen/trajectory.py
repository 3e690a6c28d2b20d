"""Agents, scenarios, dataset parsing, frame-rate resampling and windowing."""

from __future__ import annotations

import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

KINDS = ("pedestrian", "bicyclist", "skateboarder", "car", "cart", "bus")
KIND_INDEX = {k: i for i, k in enumerate(KINDS)}

SDD_LABELS = {
    "pedestrian": "pedestrian",
    "biker": "bicyclist",
    "skater": "skateboarder",
    "car": "car",
    "cart": "cart",
    "bus": "bus",
}

HEADER_RE = re.compile(r"^#\s*crowdes-traj\s+v1\b(.*)$")

# Frame differences up to this value are interpolated; larger gaps split the track.
MAX_INTERP_GAP = 2


class TrajectoryFormatError(ValueError):
    def __init__(self, message, lineno=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if lineno is not None:
            where += f"{lineno}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.lineno = lineno


@dataclass(frozen=True, eq=False)
class Agent:
    """One agent: kind, spawn frame and one world position (meters) per frame."""

    id: int
    kind: str
    spawn_frame: int
    trajectory: np.ndarray

    def __post_init__(self):
        if self.kind not in KIND_INDEX:
            raise ValueError(f"unknown agent kind {self.kind!r}")
        traj = np.array(self.trajectory, dtype=float).reshape(-1, 2)
        if len(traj) == 0:
            raise ValueError(f"agent {self.id} has an empty trajectory")
        if self.spawn_frame < 0:
            raise ValueError(f"agent {self.id} spawns at negative frame {self.spawn_frame}")
        traj.flags.writeable = False
        object.__setattr__(self, "trajectory", traj)
        object.__setattr__(self, "spawn_frame", int(self.spawn_frame))

    @property
    def end_frame(self) -> int:
        return self.spawn_frame + len(self.trajectory) - 1

    @property
    def start(self) -> np.ndarray:
        return self.trajectory[0]

    @property
    def destination(self) -> np.ndarray:
        return self.trajectory[-1]

    def pace(self, fps: float) -> float:
        """Mean per-frame displacement times fps; 0 for single-frame or static agents."""
        if len(self.trajectory) < 2:
            return 0.0
        steps = np.linalg.norm(np.diff(self.trajectory, axis=0), axis=1)
        return float(steps.mean() * fps)

    def path_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.trajectory, axis=0), axis=1).sum())

    def position_at(self, frame: int) -> np.ndarray | None:
        if self.spawn_frame <= frame <= self.end_frame:
            return self.trajectory[frame - self.spawn_frame]
        return None

    def same_as(self, other: "Agent", atol: float = 0.0) -> bool:
        return (
            self.id == other.id
            and self.kind == other.kind
            and self.spawn_frame == other.spawn_frame
            and self.trajectory.shape == other.trajectory.shape
            and np.allclose(self.trajectory, other.trajectory, rtol=0.0, atol=atol)
        )


@dataclass(frozen=True, eq=False)
class Scenario:
    fps: float
    total_frames: int
    agents: tuple = field(default_factory=tuple)
    scene_id: str = "scene"

    def __post_init__(self):
        agents = tuple(sorted(self.agents, key=lambda a: a.id))
        ids = [a.id for a in agents]
        if len(set(ids)) != len(ids):
            raise ValueError("agent ids must be unique within a scenario")
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        for a in agents:
            if a.end_frame >= self.total_frames:
                raise ValueError(
                    f"agent {a.id} ends at frame {a.end_frame} beyond total_frames={self.total_frames}"
                )
        object.__setattr__(self, "agents", agents)
        object.__setattr__(self, "total_frames", int(self.total_frames))

    def __len__(self):
        return len(self.agents)

    def alive_counts(self) -> np.ndarray:
        """Number of agents alive at each frame ``0..T_V-1``."""
        delta = np.zeros(self.total_frames + 1, dtype=np.int64)
        for a in self.agents:
            delta[a.spawn_frame] += 1
            delta[a.end_frame + 1] -= 1
        return np.cumsum(delta)[:-1]

    def frame_positions(self, frame: int) -> tuple[list[Agent], np.ndarray]:
        alive = [a for a in self.agents if a.spawn_frame <= frame <= a.end_frame]
        if not alive:
            return [], np.zeros((0, 2))
        return alive, np.array([a.trajectory[frame - a.spawn_frame] for a in alive])

    def frame_table(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Flattened rows ``(frame, agent_index, kind_index, xy)`` over all agents."""
        if not self.agents:
            z = np.zeros(0, dtype=np.int64)
            return z, z, z, np.zeros((0, 2))
        frames, idx, kinds, xy = [], [], [], []
        for i, a in enumerate(self.agents):
            n = len(a.trajectory)
            frames.append(np.arange(a.spawn_frame, a.spawn_frame + n))
            idx.append(np.full(n, i))
            kinds.append(np.full(n, KIND_INDEX[a.kind]))
            xy.append(a.trajectory)
        return np.concatenate(frames), np.concatenate(idx), np.concatenate(kinds), np.concatenate(xy)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.agents:
            return np.zeros(2), np.zeros(2)
        pts = np.concatenate([a.trajectory for a in self.agents])
        return pts.min(axis=0), pts.max(axis=0)

    def truncated(self, total_frames: int) -> "Scenario":
        """Drop everything at or after ``total_frames``."""
        agents = []
        for a in self.agents:
            if a.spawn_frame >= total_frames:
                continue
            keep = min(len(a.trajectory), total_frames - a.spawn_frame)
            agents.append(Agent(a.id, a.kind, a.spawn_frame, a.trajectory[:keep]))
        return Scenario(self.fps, min(self.total_frames, total_frames), tuple(agents), self.scene_id)

    def same_as(self, other: "Scenario", atol: float = 0.0) -> bool:
        return (
            self.fps == other.fps
            and self.total_frames == other.total_frames
            and self.scene_id == other.scene_id
            and len(self.agents) == len(other.agents)
            and all(a.same_as(b, atol) for a, b in zip(self.agents, other.agents))
        )


# --- parsing ------------------------------------------------------------------

def _apply_homography(xy: np.ndarray, H) -> np.ndarray:
    H = np.asarray(H, dtype=float).reshape(3, 3)
    pts = np.hstack([xy, np.ones((len(xy), 1))]) @ H.T
    return pts[:, :2] / pts[:, 2:3]


def _build_agents(rows: dict, path=None) -> list[Agent]:
    """Turn ``{agent_id: (kind, [(frame, x, y, lineno), ...])}`` into agents.

    Short gaps are linearly interpolated; long gaps split the track and the
    later pieces receive fresh ids above the largest id in the file.
    """
    pieces = []
    for aid in sorted(rows):
        kind, obs = rows[aid]
        obs = sorted(obs, key=lambda r: r[0])
        frames = np.array([o[0] for o in obs], dtype=np.int64)
        diffs = np.diff(frames)
        if np.any(diffs <= 0):
            bad = obs[int(np.argmax(diffs <= 0)) + 1]
            raise TrajectoryFormatError(
                f"agent {aid} has non-monotone frames (duplicate frame {bad[0]})", bad[3], path
            )
        xy = np.array([(o[1], o[2]) for o in obs], dtype=float)
        cuts = np.flatnonzero(diffs > MAX_INTERP_GAP) + 1
        for k, (lo, hi) in enumerate(zip(np.r_[0, cuts], np.r_[cuts, len(frames)])):
            f, p = frames[lo:hi], xy[lo:hi]
            dense_f = np.arange(f[0], f[-1] + 1)
            if len(dense_f) != len(f):
                p = np.column_stack([np.interp(dense_f, f, p[:, 0]), np.interp(dense_f, f, p[:, 1])])
            pieces.append((aid, k, kind, int(f[0]), p))
    next_id = max(rows) + 1 if rows else 0
    agents = []
    for aid, k, kind, f0, p in pieces:
        if k == 0:
            agents.append(Agent(aid, kind, f0, p))
        else:
            agents.append(Agent(next_id, kind, f0, p))
            next_id += 1
    return agents


def _parse_header(line: str, path) -> dict:
    m = HEADER_RE.match(line.strip())
    if not m:
        raise TrajectoryFormatError("missing '# crowdes-traj v1' header", 1, path)
    meta = {}
    for tok in m.group(1).split():
        if "=" not in tok:
            raise TrajectoryFormatError(f"bad header token {tok!r}", 1, path)
        k, v = tok.split("=", 1)
        meta[k] = v
    return meta


def parse_trajectory_file(
    path,
    format_tag: str = "generic",
    *,
    fps: float | None = None,
    scene_id: str | None = None,
    scale: float = 1.0,
    homography=None,
    frame_step: int | None = None,
) -> Scenario:
    """Load a trajectory file into a world-unit :class:`Scenario`.

    ``format_tag`` is one of ``generic`` (the ``crowdes-traj v1`` interchange
    format), ``ethucy`` (``frame ped_id x y`` rows) or ``sdd`` (Stanford Drone
    ``annotations.txt`` in pixels). Pixel coordinates are mapped to meters with
    ``homography`` when given, otherwise multiplied by ``scale``.
    """
    path = Path(path)
    if format_tag not in ("generic", "ethucy", "sdd"):
        raise ValueError(f"unknown format tag {format_tag!r}")
    lines = path.read_text().splitlines()
    rows: dict[int, tuple[str, list]] = {}
    total_frames = None

    def add(aid, kind, frame, x, y, lineno):
        entry = rows.get(aid)
        if entry is None:
            rows[aid] = (kind, [(frame, x, y, lineno)])
        else:
            if entry[0] != kind:
                raise TrajectoryFormatError(f"agent {aid} changes kind", lineno, path)
            entry[1].append((frame, x, y, lineno))

    if format_tag == "generic":
        if not lines:
            raise TrajectoryFormatError("empty file", 1, path)
        meta = _parse_header(lines[0], path)
        try:
            file_fps = float(meta["fps"])
        except (KeyError, ValueError):
            raise TrajectoryFormatError("header needs fps=<float>", 1, path) from None
        fps = fps or file_fps
        scene_id = scene_id or meta.get("scene", "scene")
        if "frames" in meta:
            total_frames = int(meta["frames"])
        for lineno, line in enumerate(lines[1:], start=2):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 5:
                raise TrajectoryFormatError(f"expected 5 fields, got {len(parts)}", lineno, path)
            try:
                frame, aid = int(parts[0]), int(parts[1])
                x, y = float(parts[3]), float(parts[4])
            except ValueError:
                raise TrajectoryFormatError(f"malformed row {s!r}", lineno, path) from None
            if parts[2] not in KIND_INDEX:
                raise TrajectoryFormatError(f"unknown kind {parts[2]!r}", lineno, path)
            if frame < 0:
                raise TrajectoryFormatError("negative frame index", lineno, path)
            add(aid, parts[2], frame, x, y, lineno)

    elif format_tag == "ethucy":
        raw = []
        for lineno, line in enumerate(lines, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = re.split(r"[,\s]+", s)
            if len(parts) < 4:
                raise TrajectoryFormatError(f"expected 'frame id x y', got {s!r}", lineno, path)
            try:
                frame, aid = int(round(float(parts[0]))), int(round(float(parts[1])))
                x, y = float(parts[2]), float(parts[3])
            except ValueError:
                raise TrajectoryFormatError(f"malformed row {s!r}", lineno, path) from None
            raw.append((frame, aid, x, y, lineno))
        if raw:
            frames = np.array(sorted({r[0] for r in raw}))
            if frame_step is None:
                frame_step = int(np.gcd.reduce(np.diff(frames))) if len(frames) > 1 else 1
                frame_step = max(frame_step, 1)
            f0 = frames[0]
            for frame, aid, x, y, lineno in raw:
                if (frame - f0) % frame_step:
                    raise TrajectoryFormatError(f"frame {frame} off the {frame_step}-frame grid", lineno, path)
                add(aid, "pedestrian", (frame - f0) // frame_step, x, y, lineno)
        fps = fps or 25.0 / (frame_step or 1)
        scene_id = scene_id or path.stem

    else:  # sdd
        raw = []
        for lineno, line in enumerate(lines, start=1):
            s = line.strip()
            if not s:
                continue
            parts = s.split()
            if len(parts) != 10:
                raise TrajectoryFormatError(f"expected 10 SDD fields, got {len(parts)}", lineno, path)
            try:
                aid = int(parts[0])
                xmin, ymin, xmax, ymax = (float(v) for v in parts[1:5])
                frame, lost = int(parts[5]), int(parts[6])
            except ValueError:
                raise TrajectoryFormatError(f"malformed row {s!r}", lineno, path) from None
            label = parts[9].strip('"').lower()
            if label not in SDD_LABELS:
                raise TrajectoryFormatError(f"unknown SDD label {parts[9]}", lineno, path)
            if lost:
                continue
            raw.append((frame, aid, SDD_LABELS[label], 0.5 * (xmin + xmax), 0.5 * (ymin + ymax), lineno))
        f0 = min((r[0] for r in raw), default=0)
        for frame, aid, kind, x, y, lineno in raw:
            add(aid, kind, frame - f0, x, y, lineno)
        fps = fps or 30.0
        scene_id = scene_id or path.parent.name or path.stem

    if format_tag != "generic" or homography is not None:
        for aid, (kind, obs) in rows.items():
            xy = np.array([(o[1], o[2]) for o in obs], dtype=float)
            xy = _apply_homography(xy, homography) if homography is not None else xy * scale
            rows[aid] = (kind, [(o[0], p[0], p[1], o[3]) for o, p in zip(obs, xy)])

    agents = _build_agents(rows, path)
    last = max((a.end_frame for a in agents), default=-1)
    if total_frames is None or total_frames <= last:
        total_frames = last + 1
    return Scenario(float(fps), total_frames, tuple(agents), scene_id)


def format_scenario(scenario: Scenario) -> str:
    """Serialize in the ``crowdes-traj v1`` interchange format (rows by frame, then id)."""
    out = [
        f"# crowdes-traj v1 fps={scenario.fps:g} scene={scenario.scene_id} frames={scenario.total_frames}"
    ]
    frames, idx, _, xy = scenario.frame_table()
    ids = np.array([a.id for a in scenario.agents], dtype=np.int64)
    order = np.lexsort((ids[idx] if len(idx) else idx, frames))
    for r in order:
        a = scenario.agents[idx[r]]
        out.append(f"{frames[r]} {a.id} {a.kind} {xy[r, 0]:.4f} {xy[r, 1]:.4f}")
    return "\n".join(out) + "\n"


def write_trajectory_file(scenario: Scenario, path) -> None:
    Path(path).write_text(format_scenario(scenario))


# --- resampling and windowing -----------------------------------------------

def resample_fps(scenario: Scenario, target_fps: float = 5.0) -> Scenario:
    """Linearly re-time every agent onto the ``target_fps`` frame grid.

    The spawn frame rounds down and the end frame rounds up onto the target grid,
    so an agent that moves keeps at least two samples; the first and last samples
    hold the original start and end positions exactly.
    """
    if not target_fps > 0:
        raise ValueError("target_fps must be positive")
    src = scenario.fps
    if target_fps == src:
        return scenario
    r = target_fps / src
    agents = []
    for a in scenario.agents:
        s, e = a.spawn_frame, a.end_frame
        js, je = math.floor(s * r + 1e-9), math.ceil(e * r - 1e-9)
        src_t = np.arange(s, e + 1) / src
        new_t = np.arange(js, je + 1) / target_fps
        new_t[0] = s / src
        new_t[-1] = e / src
        if len(new_t) == 1:
            traj = a.trajectory[:1]
        else:
            traj = np.column_stack(
                [np.interp(new_t, src_t, a.trajectory[:, 0]), np.interp(new_t, src_t, a.trajectory[:, 1])]
            )
        agents.append(Agent(a.id, a.kind, js, traj))
    last = max((a.end_frame for a in agents), default=-1)
    total = max(int(round((scenario.total_frames - 1) * r)) + 1, last + 1)
    return Scenario(float(target_fps), total, tuple(agents), scenario.scene_id)


@dataclass(frozen=True)
class Window:
    start: int
    spawned: tuple
    alive_before: tuple  # agents alive in frame ``start - 1``


def window_scenario(scenario: Scenario, window: int = 50, offset: int = 0) -> list[Window]:
    """Tile ``[offset, T_V)`` into windows of ``window`` frames.

    Each agent spawning at or after ``offset`` is listed in exactly one window,
    the one containing its spawn frame.
    """
    if window < 1:
        raise ValueError("window length must be >= 1")
    if offset < 0:
        raise ValueError("window offset must be >= 0")
    n = max(1, math.ceil((scenario.total_frames - offset) / window))
    spawned = defaultdict(list)
    for a in scenario.agents:
        if a.spawn_frame >= offset:
            spawned[(a.spawn_frame - offset) // window].append(a)
    out = []
    for w in range(n):
        start = offset + w * window
        before = tuple(a for a in scenario.agents if a.spawn_frame <= start - 1 <= a.end_frame)
        out.append(Window(start, tuple(spawned.get(w, ())), before))
    return out

