"""Grid navigation graph: A* over traversable cells, line-of-sight smoothing, control points."""

from __future__ import annotations

import heapq
import math

import numpy as np
from scipy import ndimage

from .raster import GridRaster

SQRT2 = math.sqrt(2.0)
SNAP_CELLS = 2


class NoPathError(RuntimeError):
    pass


class NavGraph:
    """8-connected graph over the traversable cells of a binary raster.

    Diagonal moves require both orthogonally adjacent cells to be traversable,
    so corners are never cut.
    """

    def __init__(self, traversable: GridRaster):
        self.raster = traversable
        self.spec = traversable.spec
        self.free = np.asarray(traversable.values) > 0
        # Without corner cutting, 8-connectivity reduces to 4-connectivity.
        self.components, _ = ndimage.label(self.free)
        if self.free.any():
            _, idx = ndimage.distance_transform_edt(~self.free, return_indices=True)
            self._nearest = idx  # (2, H, W) of (iy, ix)
        else:
            self._nearest = None

    @property
    def cell_size(self) -> float:
        return self.spec.cell_size

    def is_free(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.spec.width_cells and 0 <= iy < self.spec.height_cells and bool(self.free[iy, ix])

    def nearest_free_cell(self, xy) -> tuple[int, int] | None:
        """Nearest traversable cell to a world point (the point is clamped onto the grid first)."""
        if self._nearest is None:
            return None
        c = self.spec.world_to_cell(xy)
        ix = int(np.clip(c[0], 0, self.spec.width_cells - 1))
        iy = int(np.clip(c[1], 0, self.spec.height_cells - 1))
        return int(self._nearest[1, iy, ix]), int(self._nearest[0, iy, ix])

    def project(self, xy, max_dist: float) -> np.ndarray | None:
        """Return ``xy`` if it is traversable, else the nearest traversable cell center within ``max_dist`` meters."""
        xy = np.asarray(xy, dtype=float)
        c = self.spec.world_to_cell(xy)
        if self.is_free(int(c[0]), int(c[1])):
            return xy.copy()
        cell = self.nearest_free_cell(xy)
        if cell is None:
            return None
        center = self.spec.cell_center(cell)
        if np.linalg.norm(center - xy) > max_dist:
            return None
        return center

    def _snap(self, xy) -> tuple[int, int]:
        c = self.spec.world_to_cell(xy)
        ix, iy = int(c[0]), int(c[1])
        if self.is_free(ix, iy):
            return ix, iy
        cell = self.nearest_free_cell(xy)
        if cell is None or max(abs(cell[0] - ix), abs(cell[1] - iy)) > SNAP_CELLS:
            raise NoPathError(f"point ({xy[0]:.2f}, {xy[1]:.2f}) is not within {SNAP_CELLS} cells of walkable space")
        return cell

    def astar(self, start: tuple[int, int], goal: tuple[int, int]) -> list[tuple[int, int]]:
        """Cell sequence of a shortest 8-connected path (unit = cells)."""
        if self.components[start[1], start[0]] != self.components[goal[1], goal[0]]:
            raise NoPathError(f"cells {start} and {goal} lie in disconnected walkable regions")
        W, H = self.spec.width_cells, self.spec.height_cells
        free = self.free
        gx, gy = goal

        def h(x, y):
            dx, dy = abs(x - gx), abs(y - gy)
            return (dx + dy) + (SQRT2 - 2.0) * min(dx, dy)

        start_key = start[1] * W + start[0]
        goal_key = gy * W + gx
        g = {start_key: 0.0}
        parent = {start_key: -1}
        heap = [(h(*start), 0.0, start_key)]
        closed = set()
        while heap:
            _, gc, key = heapq.heappop(heap)
            if key in closed:
                continue
            if key == goal_key:
                break
            closed.add(key)
            y, x = divmod(key, W)
            for dx in (-1, 0, 1):
                nx = x + dx
                if nx < 0 or nx >= W:
                    continue
                for dy in (-1, 0, 1):
                    if dx == 0 and dy == 0:
                        continue
                    ny = y + dy
                    if ny < 0 or ny >= H or not free[ny, nx]:
                        continue
                    if dx and dy:
                        if not (free[y, nx] and free[ny, x]):
                            continue
                        step = SQRT2
                    else:
                        step = 1.0
                    nk = ny * W + nx
                    ng = gc + step
                    if ng < g.get(nk, math.inf) - 1e-12:
                        g[nk] = ng
                        parent[nk] = key
                        heapq.heappush(heap, (ng + h(nx, ny), ng, nk))
        if goal_key not in parent:
            raise NoPathError(f"no path between cells {start} and {goal}")
        cells = []
        k = goal_key
        while k != -1:
            y, x = divmod(k, W)
            cells.append((x, y))
            k = parent[k]
        return cells[::-1]

    def segment_clear(self, p, q) -> bool:
        """True if every cell touched by segment ``pq`` is traversable."""
        return all(self.is_free(ix, iy) for ix, iy in supercover_cells(self.spec, p, q))

    def shortest_path(self, start, goal, smooth: bool = True) -> np.ndarray:
        start = np.asarray(start, dtype=float)
        goal = np.asarray(goal, dtype=float)
        if np.array_equal(start, goal):
            return start[None, :].copy()
        cells = self.astar(self._snap(start), self._snap(goal))
        inner = [self.spec.cell_center(c) for c in cells[1:-1]]
        pts = [start] + inner + [goal]
        if not smooth:
            return np.array(pts)
        return np.array(self._smooth(pts))

    def _smooth(self, pts):
        out = [pts[0]]
        anchor = 0
        j = 1
        while j < len(pts):
            # The next raw vertex is always reachable; extend while line of sight holds.
            k = j
            while k + 1 < len(pts) and self.segment_clear(pts[anchor], pts[k + 1]):
                k += 1
            out.append(pts[k])
            anchor = k
            j = k + 1
        return out


def shortest_path(graph: NavGraph, start, goal) -> np.ndarray:
    """A* path between two world points followed by greedy line-of-sight smoothing."""
    return graph.shortest_path(start, goal, smooth=True)


def supercover_cells(spec, p, q):
    """All cells a segment touches, including both neighbours when it passes exactly through a corner."""
    cs = spec.cell_size
    ox, oy = spec.origin
    x0, y0 = (p[0] - ox) / cs, (p[1] - oy) / cs
    x1, y1 = (q[0] - ox) / cs, (q[1] - oy) / cs
    ix, iy = math.floor(x0), math.floor(y0)
    ex, ey = math.floor(x1), math.floor(y1)
    dx, dy = x1 - x0, y1 - y0
    sx = 1 if dx > 0 else -1
    sy = 1 if dy > 0 else -1
    tdx = abs(1.0 / dx) if dx != 0 else math.inf
    tdy = abs(1.0 / dy) if dy != 0 else math.inf
    if dx > 0:
        tmx = (ix + 1 - x0) * tdx
    elif dx < 0:
        tmx = (x0 - ix) * tdx
    else:
        tmx = math.inf
    if dy > 0:
        tmy = (iy + 1 - y0) * tdy
    elif dy < 0:
        tmy = (y0 - iy) * tdy
    else:
        tmy = math.inf
    cells = [(ix, iy)]
    n = abs(ex - ix) + abs(ey - iy)
    while n > 0:
        if abs(tmx - tmy) < 1e-12:
            cells.append((ix + sx, iy))
            cells.append((ix, iy + sy))
            ix += sx
            iy += sy
            tmx += tdx
            tmy += tdy
            n -= 2
        elif tmx < tmy:
            ix += sx
            tmx += tdx
            n -= 1
        else:
            iy += sy
            tmy += tdy
            n -= 1
        cells.append((ix, iy))
    return cells


# --- polylines ----------------------------------------------------------------

class Polyline:
    def __init__(self, points):
        self.points = np.asarray(points, dtype=float).reshape(-1, 2)
        if len(self.points) == 0:
            raise ValueError("empty path")
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        self.cum = np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    @property
    def end(self) -> np.ndarray:
        return self.points[-1]

    def project(self, xy) -> tuple[float, float]:
        """Arc length of the closest point on the polyline and the distance to it."""
        xy = np.asarray(xy, dtype=float)
        if len(self.points) == 1:
            return 0.0, float(np.linalg.norm(xy - self.points[0]))
        a = self.points[:-1]
        d = np.diff(self.points, axis=0)
        l2 = (d * d).sum(axis=1)
        t = np.where(l2 > 0, ((xy - a) * d).sum(axis=1) / np.where(l2 > 0, l2, 1.0), 0.0)
        t = np.clip(t, 0.0, 1.0)
        closest = a + t[:, None] * d
        dist = np.linalg.norm(closest - xy, axis=1)
        k = int(np.argmin(dist))
        return float(self.cum[k] + t[k] * math.sqrt(l2[k])), float(dist[k])

    def point_at(self, s: float) -> np.ndarray:
        if s >= self.cum[-1]:
            return self.points[-1].copy()
        if s <= 0:
            return self.points[0].copy()
        k = int(np.searchsorted(self.cum, s, side="right")) - 1
        seg = self.cum[k + 1] - self.cum[k]
        t = (s - self.cum[k]) / seg if seg > 0 else 0.0
        return self.points[k] + t * (self.points[k + 1] - self.points[k])


def path_length(path) -> float:
    return Polyline(path).length


def control_point(path, current, pace: float, horizon: float = 4.0) -> np.ndarray:
    """Point ``pace * horizon`` meters of arc length past ``current`` along the path, clamped to its end."""
    line = path if isinstance(path, Polyline) else Polyline(path)
    s, _ = line.project(current)
    return line.point_at(s + max(pace, 0.0) * horizon)
