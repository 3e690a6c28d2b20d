"""Behavior-state vocabulary: canonical motion segments clustered with k-means."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .navmesh import NoPathError, Polyline

log = logging.getLogger(__name__)

MIN_SCALE_DIST = 1e-6


@dataclass(frozen=True)
class Frame:
    """Similarity transform world -> canonical: translate, rotate by ``-angle``, divide by ``scale``."""

    origin: np.ndarray
    angle: float
    scale: float

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([[c, -s], [s, c]])

    def to_canonical(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        return ((xy - self.origin) @ self.rotation()) / self.scale

    def rotate_to_canonical(self, vec) -> np.ndarray:
        """Rotate only (no translation or scaling), for relative vectors in meters."""
        return np.asarray(vec, dtype=float) @ self.rotation()

    def to_world(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (uv * self.scale) @ self.rotation().T + self.origin


def last_heading(points) -> float | None:
    """Angle of the last nonzero displacement in a point sequence."""
    d = np.diff(np.asarray(points, dtype=float).reshape(-1, 2), axis=0)
    nz = np.flatnonzero(np.hypot(d[:, 0], d[:, 1]) > MIN_SCALE_DIST)
    if nz.size == 0:
        return None
    v = d[nz[-1]]
    return math.atan2(v[1], v[0])


def make_frame(origin, ctrl, history=None, fallback=None, scale_by: str = "control", nominal: float | None = None) -> Frame:
    """Canonical frame anchored at ``origin`` looking at the control point ``ctrl``.

    When the control point coincides with the origin, scaling is skipped and the
    heading comes from the last nonzero step of ``history`` (then ``fallback``).
    """
    origin = np.asarray(origin, dtype=float)
    v = np.asarray(ctrl, dtype=float) - origin
    dist = math.hypot(v[0], v[1])
    if dist >= MIN_SCALE_DIST:
        angle = math.atan2(v[1], v[0])
        scale = dist
    else:
        angle = None
        for pts in (history, fallback):
            if pts is not None and angle is None:
                angle = last_heading(pts)
        angle = 0.0 if angle is None else angle
        scale = 1.0
    if scale_by == "pace" and nominal is not None and nominal >= MIN_SCALE_DIST:
        scale = nominal
    return Frame(origin.copy(), angle, scale)


@dataclass(frozen=True, eq=False)
class MotionSegment:
    coords: np.ndarray  # (T_f, 2) canonical coordinates of the positions after the origin
    frame: Frame
    agent_id: int
    start_frame: int  # frame of the origin point

    def world(self) -> np.ndarray:
        return self.frame.to_world(self.coords)

    def vector(self) -> np.ndarray:
        return self.coords.ravel()


def straight_line_path(a, b) -> Polyline:
    return Polyline(np.vstack([a, b]))


def agent_path(navgraph, a, b) -> Polyline:
    """Navigation path between two world points, falling back to a straight line."""
    if navgraph is None:
        return straight_line_path(a, b)
    try:
        return Polyline(navgraph.shortest_path(a, b))
    except NoPathError:
        return straight_line_path(a, b)


def segment_and_normalize(
    scenario,
    navgraph=None,
    T_f: int = 20,
    horizon: float | None = None,
    scale_by: str = "control",
    stride: int | None = None,
) -> list[MotionSegment]:
    """Cut every agent into ``T_f``-step segments in canonical coordinates.

    A segment holds the ``T_f`` positions following its origin ``c_t``; origins
    sit every ``stride`` frames (default ``T_f``, i.e. non-overlapping) from the
    spawn frame and incomplete tails are dropped.
    """
    stride = T_f if stride is None else int(stride)
    if stride <= 0:
        raise ValueError("segment stride must be positive")
    fps = scenario.fps
    horizon = T_f / fps if horizon is None else horizon
    out = []
    for a in scenario.agents:
        traj = a.trajectory
        L = len(traj)
        if L < T_f + 1:
            continue
        pace = a.pace(fps)
        dest = traj[-1]
        for o in range(0, L - T_f, stride):
            c = traj[o]
            path = agent_path(navgraph, c, dest)
            s, _ = path.project(c)
            ctrl = path.point_at(s + pace * horizon)
            fr = make_frame(c, ctrl, history=traj[: o + 1], fallback=traj[o: o + T_f + 1],
                            scale_by=scale_by, nominal=pace * horizon)
            seg = traj[o + 1: o + T_f + 1]
            out.append(MotionSegment(fr.to_canonical(seg), fr, a.id, a.spawn_frame + o))
    return out


# --- k-means -----------------------------------------------------------------

@dataclass(eq=False)
class BehaviorVocab:
    centers: np.ndarray  # (B, 2*T_f)
    T_f: int
    sse_history: list = field(default_factory=list)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float).reshape(len(self.centers), -1)
        if self.centers.shape[0] < 1:
            raise ValueError("vocabulary needs at least one state")
        if self.centers.shape[1] != 2 * self.T_f:
            raise ValueError("center width must be 2*T_f")

    @property
    def B(self) -> int:
        return self.centers.shape[0]

    def center_coords(self, b: int) -> np.ndarray:
        return self.centers[b].reshape(self.T_f, 2)

    def save(self, path) -> None:
        lines = [f"{self.B} {self.T_f}"]
        lines += [" ".join(repr(float(v)) for v in row) for row in self.centers]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "BehaviorVocab":
        lines = [l for l in Path(path).read_text().splitlines() if l.strip()]
        B, T_f = (int(v) for v in lines[0].split())
        centers = np.array([[float(v) for v in l.split()] for l in lines[1:]])
        if centers.shape != (B, 2 * T_f):
            raise ValueError(f"{path}: expected {B} centers of width {2 * T_f}")
        return cls(centers, T_f)


def _as_matrix(segments) -> np.ndarray:
    rows = [s.vector() if isinstance(s, MotionSegment) else np.asarray(s, float).ravel() for s in segments]
    return np.array(rows, dtype=float)


def _sq_dists(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)


def kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise ValueError("fewer distinct segments than requested states")
        idx = rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans_fit(segments, B: int = 8, max_iters: int = 100, seed: int = 0, T_f: int | None = None) -> BehaviorVocab:
    """Lloyd's algorithm from k-means++ seeds; stops once assignments no longer change."""
    X = _as_matrix(segments)
    if len(X) < B:
        raise ValueError(f"need at least B={B} segments, got {len(X)}")
    if T_f is None:
        T_f = X.shape[1] // 2
    rng = np.random.default_rng(seed)
    C = kmeans_pp_init(X, B, rng)
    labels = None
    history = []
    for _ in range(max_iters):
        new = np.argmin(_sq_dists(X, C), axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for b in range(B):
            members = X[labels == b]
            if len(members):
                C[b] = members.mean(axis=0)
        history.append(float(((X - C[labels]) ** 2).sum()))
    return BehaviorVocab(C, T_f, history)


def assign_state(segment, vocab: BehaviorVocab) -> int:
    """Index of the nearest center by squared distance; ties go to the lowest index."""
    v = segment.vector() if isinstance(segment, MotionSegment) else np.asarray(segment, float).ravel()
    return int(np.argmin(((vocab.centers - v) ** 2).sum(axis=1)))


def assign_states(segments, vocab: BehaviorVocab) -> np.ndarray:
    X = _as_matrix(segments)
    if len(X) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmin(_sq_dists(X, vocab.centers), axis=1)
