"""Metric-registered 2-D rasters and their on-disk formats.

Cell ``(ix, iy)`` covers the world square
``[ox + ix*cs, ox + (ix+1)*cs) x [oy + iy*cs, oy + (iy+1)*cs)``; values are
stored as an array of shape ``(height_cells, width_cells)`` indexed ``[iy, ix]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class OutOfBoundsError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Raster geometry without values."""

    width_cells: int
    height_cells: int
    cell_size: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.width_cells <= 0 or self.height_cells <= 0:
            raise ValueError("raster dimensions must be positive")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be > 0")

    @classmethod
    def covering(cls, lo, hi, cell_size: float = 0.5) -> "GridSpec":
        """Smallest grid anchored at ``lo`` that contains the box ``[lo, hi]``."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        w = max(1, int(np.floor((hi[0] - lo[0]) / cell_size)) + 1)
        h = max(1, int(np.floor((hi[1] - lo[1]) / cell_size)) + 1)
        return cls(w, h, float(cell_size), (float(lo[0]), float(lo[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_cells, self.width_cells)

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """``(x_min, y_min, x_max, y_max)`` in meters."""
        ox, oy = self.origin
        return (ox, oy, ox + self.width_cells * self.cell_size, oy + self.height_cells * self.cell_size)

    def world_to_cell(self, xy) -> np.ndarray:
        """Integer ``(ix, iy)`` for each point; no bounds check."""
        xy = np.asarray(xy, dtype=float)
        return np.floor((xy - np.asarray(self.origin)) / self.cell_size).astype(np.int64)

    def cell_center(self, cells) -> np.ndarray:
        cells = np.asarray(cells, dtype=float)
        return np.asarray(self.origin) + (cells + 0.5) * self.cell_size

    def contains_cell(self, cells) -> np.ndarray:
        cells = np.asarray(cells)
        return (
            (cells[..., 0] >= 0)
            & (cells[..., 0] < self.width_cells)
            & (cells[..., 1] >= 0)
            & (cells[..., 1] < self.height_cells)
        )

    def all_cell_centers(self) -> np.ndarray:
        """Centers of every cell, shape ``(height, width, 2)``."""
        ix, iy = np.meshgrid(np.arange(self.width_cells), np.arange(self.height_cells))
        return self.cell_center(np.stack([ix, iy], axis=-1))


@dataclass(frozen=True, eq=False)
class GridRaster:
    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.shape != self.spec.shape:
            raise ValueError(f"values shape {values.shape} does not match grid {self.spec.shape}")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, spec: GridSpec, dtype=float) -> "GridRaster":
        return cls(spec, np.zeros(spec.shape, dtype=dtype))

    @property
    def width_cells(self) -> int:
        return self.spec.width_cells

    @property
    def height_cells(self) -> int:
        return self.spec.height_cells

    @property
    def cell_size(self) -> float:
        return self.spec.cell_size

    @property
    def origin(self) -> tuple[float, float]:
        return self.spec.origin

    def sample(self, xy, fill=0):
        """Nearest-cell lookup; points outside the raster get ``fill``."""
        cells = self.spec.world_to_cell(xy)
        inside = self.spec.contains_cell(cells)
        out = np.full(cells.shape[:-1], fill, dtype=self.values.dtype)
        c = cells[inside]
        out[inside] = self.values[c[:, 1], c[:, 0]]
        return out

    def with_values(self, values) -> "GridRaster":
        return GridRaster(self.spec, values)

    def __eq__(self, other):
        if not isinstance(other, GridRaster):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.values, other.values)


# --- file formats -------------------------------------------------------------

def write_pgm(raster: GridRaster, path) -> None:
    """Write an 8-bit binary PGM (P5). Geometry goes into a comment line."""
    vals = np.asarray(raster.values)
    if vals.min(initial=0) < 0 or vals.max(initial=0) > 255:
        raise ValueError("PGM channel values must be in 0..255")
    s = raster.spec
    header = (
        f"P5\n# grid {s.cell_size!r} {s.origin[0]!r} {s.origin[1]!r}\n"
        f"{s.width_cells} {s.height_cells}\n255\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(vals.astype(np.uint8).tobytes())


def read_pgm(path, cell_size: float | None = None, origin=None) -> GridRaster:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    geom = None
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            end = data.index(b"\n", pos)
            parts = data[pos + 1:end].split()
            if len(parts) == 4 and parts[0] == b"grid":
                geom = tuple(float(p) for p in parts[1:])
            pos = end + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    pos += 1
    raw = np.frombuffer(data[pos:pos + w * h], dtype=np.uint8)
    if raw.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    if geom is not None:
        cs, ox, oy = geom
    else:
        cs, ox, oy = 1.0, 0.0, 0.0
    if cell_size is not None:
        cs = cell_size
    if origin is not None:
        ox, oy = origin
    return GridRaster(GridSpec(w, h, cs, (ox, oy)), raw.reshape(h, w).astype(np.int64))


def write_grid_text(raster: GridRaster, path) -> None:
    s = raster.spec
    lines = [f"{s.width_cells} {s.height_cells} {s.cell_size!r} {s.origin[0]!r} {s.origin[1]!r}"]
    for row in np.asarray(raster.values, dtype=float):
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_grid_text(path) -> GridRaster:
    lines = Path(path).read_text().split("\n")
    head = lines[0].split()
    if len(head) != 5:
        raise ValueError(f"{path}:1: expected 'width height cell_size origin_x origin_y'")
    w, h = int(head[0]), int(head[1])
    cs, ox, oy = (float(v) for v in head[2:])
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = [float(v) for v in line.split()]
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        if len(row) != w:
            raise ValueError(f"{path}:{lineno}: expected {w} values, got {len(row)}")
        rows.append(row)
    if len(rows) != h:
        raise ValueError(f"{path}: expected {h} rows, got {len(rows)}")
    return GridRaster(GridSpec(w, h, cs, (ox, oy)), np.array(rows, dtype=float))
