"""Uniform tensor grids with homogeneous Dirichlet boundaries, the discrete
elliptic operator -lap + id, L2 pairing, and contact-set classification.

Interior nodes are ordered lexicographically by axis (C order); boundary
nodes carry the value 0 and never appear in the unknown vector.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Grid",
    "TimeGrid",
    "ScalarField",
    "FieldTrajectory",
    "NodeMask",
    "build_grid",
    "build_timegrid",
    "elliptic_matrix",
    "apply_elliptic",
    "inner",
    "classify_nodes",
    "default_contact_threshold",
    "write_field_csv",
    "read_field_csv",
    "write_trajectory_csv",
    "read_trajectory_csv",
]

# Contact threshold defaults: relative to the obstacle gap, floored absolutely.
DELTA_C_REL = 1e-8
DELTA_C_FLOOR = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Grid:
    """Uniform grid on a box, interior nodes only (Dirichlet closure)."""

    dim: int
    bounds: tuple[tuple[float, float], ...]
    n_interior: tuple[int, ...]

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(
            (b - a) / (n + 1) for (a, b), n in zip(self.bounds, self.n_interior)
        )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n_interior

    @property
    def n_total(self) -> int:
        return int(np.prod(self.n_interior))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axis_coordinates(self, axis: int) -> np.ndarray:
        a, b = self.bounds[axis]
        h = self.spacing[axis]
        return a + h * np.arange(1, self.n_interior[axis] + 1)

    def coordinates(self) -> np.ndarray:
        """Interior node coordinates, shape (n_total, dim), lexicographic."""
        axes = [self.axis_coordinates(k) for k in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel(order="C") for m in mesh], axis=1)

    def metadata(self) -> dict:
        return {
            "dim": self.dim,
            "bounds": [list(b) for b in self.bounds],
            "n_interior": list(self.n_interior),
            "spacing": list(self.spacing),
        }


def build_grid(dim, bounds, n_interior) -> Grid:
    """Validate and construct a Grid.

    bounds: (a, b) in 1D or a sequence of per-axis (a, b) pairs.
    n_interior: int or per-axis sequence, at least 3 nodes per axis.
    """
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim}")
    b = np.asarray(bounds, dtype=float)
    if b.ndim == 1:
        b = b[None, :]
    if b.shape != (dim, 2):
        raise ValueError(f"bounds must give one (a, b) pair per axis, got {bounds!r}")
    if np.isscalar(n_interior):
        n = (int(n_interior),) * dim
    else:
        n = tuple(int(k) for k in n_interior)
    if len(n) != dim:
        raise ValueError("n_interior must match dim")
    if any(k < 3 for k in n):
        raise ValueError(f"need at least 3 interior nodes per axis, got {n}")
    if any(hi <= lo for lo, hi in b):
        raise ValueError(f"degenerate bounds {bounds!r}")
    return Grid(dim=dim, bounds=tuple((float(lo), float(hi)) for lo, hi in b), n_interior=n)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [0, horizon] into n_steps implicit-Euler steps."""

    horizon: float
    n_steps: int

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


def build_timegrid(horizon: float, n_steps: int) -> TimeGrid:
    if horizon <= 0 or n_steps < 1:
        raise ValueError(f"need horizon > 0 and n_steps >= 1, got {horizon}, {n_steps}")
    return TimeGrid(horizon=float(horizon), n_steps=int(n_steps))


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Nodal values on the interior of a grid (read-only array)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = _readonly(self.values)
        if v.shape != (self.grid.n_total,):
            raise ValueError(f"expected {self.grid.n_total} values, got shape {v.shape}")
        object.__setattr__(self, "values", v)

    @staticmethod
    def constant(grid: Grid, value: float) -> "ScalarField":
        return ScalarField(grid, np.full(grid.n_total, float(value)))

    @staticmethod
    def zeros(grid: Grid) -> "ScalarField":
        return ScalarField.constant(grid, 0.0)

    @staticmethod
    def from_function(grid: Grid, fn) -> "ScalarField":
        """fn maps an (N, dim) coordinate array to N values."""
        return ScalarField(grid, np.asarray(fn(grid.coordinates()), dtype=float))

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0


@dataclass(frozen=True, eq=False)
class FieldTrajectory:
    """One ScalarField per time slice 0..n_steps on a shared grid."""

    timegrid: TimeGrid
    slices: tuple[ScalarField, ...]

    def __post_init__(self):
        if len(self.slices) != self.timegrid.n_steps + 1:
            raise ValueError("need one slice per time level 0..n_steps")
        g = self.slices[0].grid
        if any(s.grid != g for s in self.slices):
            raise ValueError("all slices must share one grid")
        object.__setattr__(self, "slices", tuple(self.slices))

    @property
    def grid(self) -> Grid:
        return self.slices[0].grid

    def array(self) -> np.ndarray:
        return np.stack([s.values for s in self.slices], axis=0)

    @staticmethod
    def from_array(grid: Grid, timegrid: TimeGrid, a: np.ndarray) -> "FieldTrajectory":
        a = np.asarray(a, dtype=float)
        if a.shape != (timegrid.n_steps + 1, grid.n_total):
            raise ValueError(f"expected shape {(timegrid.n_steps + 1, grid.n_total)}, got {a.shape}")
        return FieldTrajectory(timegrid, tuple(ScalarField(grid, row) for row in a))

    @staticmethod
    def constant(grid: Grid, timegrid: TimeGrid, value: float) -> "FieldTrajectory":
        return FieldTrajectory.from_array(
            grid, timegrid, np.full((timegrid.n_steps + 1, grid.n_total), float(value))
        )


@dataclass(frozen=True, eq=False)
class NodeMask:
    """Boolean flag per interior node."""

    grid: Grid
    mask: np.ndarray

    def __post_init__(self):
        m = np.array(self.mask, dtype=bool, copy=True)
        m.setflags(write=False)
        if m.shape != (self.grid.n_total,):
            raise ValueError(f"expected {self.grid.n_total} flags, got shape {m.shape}")
        object.__setattr__(self, "mask", m)

    @staticmethod
    def none(grid: Grid) -> "NodeMask":
        return NodeMask(grid, np.zeros(grid.n_total, dtype=bool))

    @staticmethod
    def all(grid: Grid) -> "NodeMask":
        return NodeMask(grid, np.ones(grid.n_total, dtype=bool))

    def complement(self) -> "NodeMask":
        return NodeMask(self.grid, ~self.mask)

    def count(self) -> int:
        return int(self.mask.sum())


@lru_cache(maxsize=None)
def _neg_laplacian(grid: Grid) -> sp.csr_matrix:
    """-lap with the 3-point (1D) / 5-point (2D) stencil, Dirichlet closure."""
    blocks = []
    for n, h in zip(grid.n_interior, grid.spacing):
        main = np.full(n, 2.0 / h**2)
        off = np.full(n - 1, -1.0 / h**2)
        blocks.append(sp.diags([off, main, off], [-1, 0, 1], format="csr"))
    if grid.dim == 1:
        return blocks[0].tocsr()
    eyes = [sp.identity(n, format="csr") for n in grid.n_interior]
    return (sp.kron(blocks[0], eyes[1]) + sp.kron(eyes[0], blocks[1])).tocsr()


@lru_cache(maxsize=None)
def elliptic_matrix(grid: Grid, with_zero_order: bool = True) -> sp.csr_matrix:
    """The operator -lap (+ id when with_zero_order) as a sparse matrix."""
    a = _neg_laplacian(grid)
    if with_zero_order:
        a = (a + sp.identity(grid.n_total, format="csr")).tocsr()
    return a


def apply_elliptic(field: ScalarField, with_zero_order: bool = True) -> ScalarField:
    """Apply -lap (+ id) to a field; missing neighbors count as 0."""
    a = elliptic_matrix(field.grid, with_zero_order)
    return ScalarField(field.grid, a @ field.values)


def inner(f: ScalarField, g: ScalarField) -> float:
    """Discrete L2 pairing: sum of products times the cell volume."""
    if f.grid != g.grid:
        raise ValueError("inner product requires fields on one grid")
    return float(np.dot(f.values, g.values) * f.grid.cell_volume)


def default_contact_threshold(u_values: np.ndarray, psi_values: np.ndarray) -> float:
    gap = float(np.max(np.abs(psi_values - u_values))) if len(u_values) else 0.0
    return max(DELTA_C_FLOOR, DELTA_C_REL * gap)


def classify_nodes(u: ScalarField, psi: ScalarField | None = None, delta_c: float | None = None):
    """Split nodes into (continuation, contact) by u < psi - delta_c.

    Returns two complementary NodeMasks. delta_c defaults to a small
    fraction of the obstacle gap, floored at an absolute level; exact
    equality u = psi is never reliable in floating point.
    """
    psi_values = np.zeros_like(u.values) if psi is None else psi.values
    if psi is not None and psi.grid != u.grid:
        raise ValueError("u and psi must share one grid")
    if delta_c is None:
        delta_c = default_contact_threshold(u.values, psi_values)
    if delta_c < 0:
        raise ValueError("delta_c must be nonnegative")
    cont = u.values < psi_values - delta_c
    return NodeMask(u.grid, cont), NodeMask(u.grid, ~cont)


# ---------------------------------------------------------------------------
# CSV serialization: header x[,y],value; one row per interior node,
# lexicographic order. Trajectories get one CSV per slice plus a manifest.

def write_field_csv(field: ScalarField, path) -> None:
    coords = field.grid.coordinates()
    header = ",".join(["x", "y"][: field.grid.dim] + ["value"])
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(header + "\n")
        for row, v in zip(coords, field.values):
            cells = [format(c, ".17g") for c in row] + [format(v, ".17g")]
            fh.write(",".join(cells) + "\n")


def read_field_csv(grid: Grid, path) -> ScalarField:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"empty field file: {path}")
    expected_header = ",".join(["x", "y"][: grid.dim] + ["value"])
    if lines[0] != expected_header:
        raise ValueError(f"bad header in {path}: {lines[0]!r} (expected {expected_header!r})")
    data = np.array([[float(c) for c in ln.split(",")] for ln in lines[1:]])
    if data.shape != (grid.n_total, grid.dim + 1):
        raise ValueError(
            f"field file {path} has shape {data.shape}, grid needs {(grid.n_total, grid.dim + 1)}"
        )
    coords = grid.coordinates()
    if not np.allclose(data[:, : grid.dim], coords, atol=1e-12 * (1 + np.abs(coords).max())):
        raise ValueError(f"node coordinates in {path} do not match the grid")
    return ScalarField(grid, data[:, -1])


def write_trajectory_csv(traj: FieldTrajectory, directory, prefix: str) -> str:
    """Write slice CSVs plus a JSON manifest; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    files = []
    for k, s in enumerate(traj.slices):
        name = f"{prefix}_{k:04d}.csv"
        write_field_csv(s, os.path.join(directory, name))
        files.append(name)
    manifest = {
        "prefix": prefix,
        "horizon": traj.timegrid.horizon,
        "n_steps": traj.timegrid.n_steps,
        "files": files,
    }
    mpath = os.path.join(directory, f"{prefix}_manifest.json")
    with open(mpath, "w", encoding="ascii", newline="\n") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return mpath


def read_trajectory_csv(grid: Grid, manifest_path) -> FieldTrajectory:
    with open(manifest_path, "r", encoding="ascii") as fh:
        manifest = json.load(fh)
    tg = build_timegrid(manifest["horizon"], manifest["n_steps"])
    base = os.path.dirname(manifest_path)
    slices = [read_field_csv(grid, os.path.join(base, name)) for name in manifest["files"]]
    return FieldTrajectory(tg, tuple(slices))
