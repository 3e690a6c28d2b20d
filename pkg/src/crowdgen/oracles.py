"""Slow reference implementations used to cross-check the metrics on small inputs."""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import linprog

from .metrics import COLLISION_DISTANCE, QuadratGrid, emd_1d, metric_col, quadrat_series, second_frames
from .trajectory import Scenario


def emd_lp(samples_a, samples_b) -> float:
    """1-Wasserstein distance as an explicit optimal-transport linear program."""
    a = np.asarray(samples_a, float).ravel()
    b = np.asarray(samples_b, float).ravel()
    n, m = len(a), len(b)
    cost = np.abs(a[:, None] - b[None, :]).ravel()
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([np.full(n, 1.0 / n), np.full(m, 1.0 / m)])
    res = linprog(cost, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def dtw_exhaustive(traj_a, traj_b, fps: float = 1.0) -> float:
    """Minimum alignment cost over every monotone warping path, enumerated explicitly."""
    a = np.asarray(traj_a, float).reshape(-1, 2)
    b = np.asarray(traj_b, float).reshape(-1, 2)
    n, m = len(a), len(b)
    cost = np.linalg.norm(a[:, None] - b[None, :], axis=2)
    best = math.inf
    stack = [(0, 0, cost[0, 0])]
    while stack:
        i, j, acc = stack.pop()
        if i == n - 1 and j == m - 1:
            best = min(best, acc)
            continue
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            ii, jj = i + di, j + dj
            if ii < n and jj < m:
                stack.append((ii, jj, acc + cost[ii, jj]))
    return best / fps


def quadrat_counts_direct(scenario: Scenario, grid: QuadratGrid) -> np.ndarray:
    """Agents per quadrat per sampled second, by looping over agents one at a time."""
    frames = second_frames(scenario)
    out = np.zeros((len(frames), grid.Q * grid.Q), dtype=np.int64)
    for s, f in enumerate(frames):
        for a in scenario.agents:
            p = a.position_at(int(f))
            if p is None:
                continue
            span = np.where(grid.hi - grid.lo > 0, grid.hi - grid.lo, 1.0)
            cell = (p - grid.lo) / span * grid.Q
            ix = min(max(int(math.floor(cell[0])), 0), grid.Q - 1)
            iy = min(max(int(math.floor(cell[1])), 0), grid.Q - 1)
            out[s, iy * grid.Q + ix] += 1
    return out


def collision_count_direct(scenario: Scenario, radius: float = COLLISION_DISTANCE) -> int:
    """Number of (frame, agent) pairs closer than ``radius`` to some other agent."""
    n = 0
    for t in range(scenario.total_frames):
        pts = [a.position_at(t) for a in scenario.agents]
        pts = [p for p in pts if p is not None]
        for i, p in enumerate(pts):
            if any(j != i and math.dist(p, q) < radius for j, q in enumerate(pts)):
                n += 1
    return n


def cross_check(gen: Scenario, gt: Scenario, Q: int = 10, max_series: int = 60) -> dict[str, bool]:
    """Compare the fast metric code against the reference loops on one scenario pair.

    EMD is checked only when both per-second series have at most ``max_series``
    samples, since the transport LP grows quadratically.
    """
    grid = QuadratGrid.for_scenario(gt, Q)
    out = {}
    out["quadrat counts"] = all(
        np.array_equal(quadrat_series(s, grid)["counts"], quadrat_counts_direct(s, grid)) for s in (gen, gt)
    )
    n_pairs = gen.total_frames * len(gen)
    direct = 100.0 * collision_count_direct(gen) / n_pairs if n_pairs else 0.0
    out["collisions"] = math.isclose(metric_col(gen), direct, rel_tol=0, abs_tol=1e-12)
    a, b = quadrat_series(gen, grid)["pop"], quadrat_series(gt, grid)["pop"]
    if 0 < len(a) <= max_series and 0 < len(b) <= max_series:
        out["emd"] = abs(emd_1d(a, b) - emd_lp(a, b)) <= 1e-9
    return out
