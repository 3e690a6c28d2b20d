"""Scene-level and agent-level similarity metrics for generated crowd scenarios."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numba as nb
import numpy as np

from .trajectory import KIND_INDEX, Scenario, resample_fps

log = logging.getLogger(__name__)

COLLISION_DISTANCE = 0.2
ZERO_MEAN = 1e-12  # kinematic ground-truth means at or below this are treated as zero
METRIC_NAMES = ("dens", "freq", "cov", "pop", "kinem", "dtw", "div", "col")


# --- 1-D earth mover's distance ----------------------------------------------

def emd_1d(samples_a, samples_b) -> float:
    """Exact 1-Wasserstein distance between two empirical distributions.

    Integrates the absolute difference of the two quantile functions, which
    are step functions with breakpoints at ``i/n`` and ``j/m``.
    """
    a = np.sort(np.asarray(samples_a, dtype=float).ravel())
    b = np.sort(np.asarray(samples_b, dtype=float).ravel())
    n, m = a.size, b.size
    if n == 0 or m == 0:
        raise ValueError("emd_1d needs two non-empty sample sets")
    if n == m:
        return float(np.abs(a - b).sum() / n)
    # Merge breakpoints as exact fractions i*m and j*n over the common denominator n*m.
    cuts = np.union1d(np.arange(n + 1) * m, np.arange(m + 1) * n)
    widths = np.diff(cuts)
    mids = cuts[:-1]
    qa = a[mids // m]
    qb = b[mids // n]
    return float(np.dot(widths, np.abs(qa - qb)) / (n * m))


# --- dynamic time warping ----------------------------------------------------

@nb.njit(cache=True)
def _dtw_cost(a, b):
    n, m = a.shape[0], b.shape[0]
    prev = np.full(m + 1, np.inf)
    cur = np.full(m + 1, np.inf)
    prev[0] = 0.0
    for i in range(1, n + 1):
        cur[0] = np.inf
        for j in range(1, m + 1):
            dx = a[i - 1, 0] - b[j - 1, 0]
            dy = a[i - 1, 1] - b[j - 1, 1]
            c = math.sqrt(dx * dx + dy * dy)
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = c + best
        prev, cur = cur, prev
    return prev[m]


@nb.njit(cache=True)
def _dtw_matrix(src, src_off, dst, dst_off):
    ns = src_off.shape[0] - 1
    nd = dst_off.shape[0] - 1
    out = np.empty((ns, nd))
    for i in range(ns):
        a = src[src_off[i]:src_off[i + 1]]
        for j in range(nd):
            out[i, j] = _dtw_cost(a, dst[dst_off[j]:dst_off[j + 1]])
    return out


def dtw(traj_a, traj_b, fps: float = 1.0) -> float:
    """Full-alignment DTW over Euclidean point costs, divided by ``fps``."""
    a = np.ascontiguousarray(traj_a, dtype=float).reshape(-1, 2)
    b = np.ascontiguousarray(traj_b, dtype=float).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("dtw needs non-empty trajectories")
    return float(_dtw_cost(a, b)) / fps


def _packed(trajs):
    off = np.zeros(len(trajs) + 1, dtype=np.int64)
    off[1:] = np.cumsum([len(t) for t in trajs])
    data = np.ascontiguousarray(np.concatenate(trajs), dtype=float) if trajs else np.zeros((0, 2))
    return data, off


def dtw_matrix(trajs_a, trajs_b, fps: float = 1.0) -> np.ndarray:
    """Pairwise DTW, ``out[i, j] = dtw(trajs_a[i], trajs_b[j], fps)``."""
    da, oa = _packed(list(trajs_a))
    db, ob = _packed(list(trajs_b))
    return _dtw_matrix(da, oa, db, ob) / fps


def metric_dtw_div(gen: Scenario, gt: Scenario, fps: float | None = None) -> tuple[float, float]:
    """Bidirectional minimum-pairwise DTW and nearest-match coverage diversity.

    Diversity per direction is the number of distinct target trajectories
    picked as a nearest match (ties to the lowest index) divided by the
    target count; the two directions are averaged.
    """
    if not len(gen) or not len(gt):
        raise ValueError("DTW/diversity need non-empty scenarios")
    fps = fps or gt.fps
    D = dtw_matrix([a.trajectory for a in gen.agents], [a.trajectory for a in gt.agents], fps)
    g2t = D.min(axis=1).mean()
    t2g = D.min(axis=0).mean()
    cover_gt = np.unique(D.argmin(axis=1)).size / D.shape[1]
    cover_gen = np.unique(D.argmin(axis=0)).size / D.shape[0]
    return 0.5 * (g2t + t2g), 0.5 * (cover_gt + cover_gen)


# --- quadrat metrics ---------------------------------------------------------

@dataclass(frozen=True)
class QuadratGrid:
    lo: np.ndarray
    hi: np.ndarray
    Q: int = 10

    @classmethod
    def for_scenario(cls, gt: Scenario, Q: int = 10) -> "QuadratGrid":
        lo, hi = gt.bounds()
        return cls(np.asarray(lo, float), np.asarray(hi, float), Q)

    def index(self, xy) -> np.ndarray:
        """Flat quadrat index per point; points outside are clipped to the border."""
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        span = np.where(self.hi - self.lo > 0, self.hi - self.lo, 1.0)
        q = np.floor((xy - self.lo) / span * self.Q).astype(np.int64)
        q = np.clip(q, 0, self.Q - 1)
        return q[:, 1] * self.Q + q[:, 0]


def second_frames(scenario: Scenario) -> np.ndarray:
    """Frames sampled at 1-second intervals."""
    n_sec = int(math.floor((scenario.total_frames - 1) / scenario.fps)) + 1 if scenario.total_frames else 0
    frames = np.round(np.arange(n_sec) * scenario.fps).astype(np.int64)
    return frames[frames < scenario.total_frames]


def quadrat_series(scenario: Scenario, grid: QuadratGrid) -> dict[str, np.ndarray]:
    """Per-second density, kind frequency, coverage, population and raw quadrat counts."""
    frames = second_frames(scenario)
    Q2 = grid.Q * grid.Q
    nk = len(KIND_INDEX)
    counts = np.zeros((len(frames), Q2), dtype=np.int64)
    kinds = np.zeros((len(frames), Q2, nk), dtype=bool)
    f, _, k, xy = scenario.frame_table()
    if len(f):
        slot = np.full(scenario.total_frames, -1, dtype=np.int64)
        slot[frames] = np.arange(len(frames))
        sel = slot[f] >= 0
        s = slot[f[sel]]
        q = grid.index(xy[sel])
        np.add.at(counts, (s, q), 1)
        kinds[s, q, k[sel]] = True
    return {
        "frames": frames,
        "counts": counts,
        "dens": counts.sum(axis=1) / Q2,
        "freq": kinds.sum(axis=2).sum(axis=1) / Q2,
        "cov": (counts > 0).sum(axis=1) / Q2,
        "pop": counts.sum(axis=1).astype(float),
    }


def _emd_or_zero(a, b):
    if len(a) == 0 and len(b) == 0:
        return 0.0
    if len(a) == 0 or len(b) == 0:
        raise ValueError("cannot compare an empty time series with a non-empty one")
    return emd_1d(a, b)


def metric_scene(gen: Scenario, gt: Scenario, Q: int = 10) -> dict[str, float]:
    """Dens, Freq, Cov and Pop: EMD between per-second series on the ground-truth quadrat grid."""
    if gen.scene_id != gt.scene_id:
        raise ValueError(f"scene mismatch: {gen.scene_id!r} vs {gt.scene_id!r}")
    grid = QuadratGrid.for_scenario(gt, Q)
    sg = quadrat_series(gen, grid)
    st = quadrat_series(gt, grid)
    return {k: _emd_or_zero(sg[k], st[k]) for k in ("dens", "freq", "cov", "pop")}


# --- kinematics --------------------------------------------------------------

def kinematic_samples(scenario: Scenario) -> dict[str, np.ndarray]:
    fps = scenario.fps
    dist, speed, acc, dur = [], [], [], []
    for a in scenario.agents:
        t = a.trajectory
        d1 = np.diff(t, axis=0)
        dist.append(np.linalg.norm(d1, axis=1).sum())
        dur.append(len(t) / fps)
        if len(d1):
            speed.append(np.linalg.norm(d1, axis=1) * fps)
        if len(t) > 2:
            acc.append(np.linalg.norm(np.diff(d1, axis=0), axis=1) * fps * fps)
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)
    return {
        "dist": np.array(dist),
        "vel": cat(speed),
        "acc": cat(acc),
        "time": np.array(dur),
    }


def metric_kinem(gen: Scenario, gt: Scenario) -> float:
    """Mean of four EMDs (distance, speed, acceleration, duration), each normalized by the ground-truth mean."""
    if not len(gen) or not len(gt):
        raise ValueError("kinematics need non-empty scenarios")
    sg, st = kinematic_samples(gen), kinematic_samples(gt)
    parts = []
    for key in ("dist", "vel", "acc", "time"):
        ref = st[key].mean() if len(st[key]) else 0.0
        if ref <= ZERO_MEAN or len(sg[key]) == 0:
            log.warning("kinematics: skipping %s component (ground-truth mean %s)", key, ref)
            continue
        parts.append(emd_1d(sg[key] / ref, st[key] / ref))
    if not parts:
        return 0.0
    return float(np.mean(parts))


# --- collisions --------------------------------------------------------------

def metric_col(gen: Scenario, radius: float = COLLISION_DISTANCE) -> float:
    """Percentage of (frame, agent) pairs within ``radius`` of another live agent."""
    if not len(gen):
        return 0.0
    f, idx, _, xy = gen.frame_table()
    order = np.argsort(f, kind="stable")
    f, xy = f[order], xy[order]
    bounds = np.flatnonzero(np.diff(f)) + 1
    flagged = 0
    for chunk in np.split(np.arange(len(f)), bounds):
        if len(chunk) < 2:
            continue
        p = xy[chunk]
        d2 = ((p[:, None, :] - p[None, :, :]) ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        flagged += int((d2 < radius * radius).any(axis=1).sum())
    return 100.0 * flagged / (gen.total_frames * len(gen))


# --- report ------------------------------------------------------------------

@dataclass
class MetricsReport:
    dens: float
    freq: float
    cov: float
    pop: float
    kinem: float
    dtw: float
    div: float
    col: float
    metadata: dict = field(default_factory=dict)

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, k) for k in METRIC_NAMES)

    def csv_header(self) -> str:
        return ",".join(METRIC_NAMES)

    def csv_row(self) -> str:
        return ",".join(f"{v:.6f}" for v in self.values())

    def table(self) -> str:
        width = max(len(k) for k in METRIC_NAMES)
        return "\n".join(f"{k.capitalize():<{width + 1}} {v:10.4f}" for k, v in zip(METRIC_NAMES, self.values()))

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("metadata")
        return d


def evaluate_single(gen: Scenario, gt: Scenario, Q: int = 10) -> MetricsReport:
    if gen.fps != gt.fps:
        gen = resample_fps(gen, gt.fps)
    gen = gen.truncated(gt.total_frames)
    scene = metric_scene(gen, gt, Q)
    if len(gen) and len(gt):
        kinem = metric_kinem(gen, gt)
        d, div = metric_dtw_div(gen, gt, gt.fps)
    else:
        log.warning("empty scenario: agent-level metrics set to their worst values")
        kinem, d, div = math.inf, math.inf, 0.0
    return MetricsReport(
        dens=scene["dens"], freq=scene["freq"], cov=scene["cov"], pop=scene["pop"],
        kinem=kinem, dtw=d, div=div, col=metric_col(gen),
    )


def evaluate(gen_list, gt: Scenario, Q: int = 10, metadata: dict | None = None) -> MetricsReport:
    """Truncate each repetition to the ground-truth duration, score it, and average."""
    gen_list = list(gen_list)
    if not gen_list:
        raise ValueError("evaluate needs at least one generated scenario")
    reports = [evaluate_single(g, gt, Q) for g in gen_list]
    mean = np.mean([r.values() for r in reports], axis=0)
    meta = {"repetitions": len(reports), "scene": gt.scene_id}
    meta.update(metadata or {})
    return MetricsReport(*map(float, mean), metadata=meta)
