"""Cost operators m -> f(x, m) with monotonicity metadata, the optional
antiderivative used by the variational route, and the per-node zero
crossing that drives the exit-rate equilibration on mixed nodes.

Monotonicity tags are derived from parameter signs at construction:
local power laws with a > 0 are strictly monotone in the order sense
(m1 <= m2 nodewise implies f(m1) <= f(m2)), negative coupling flips it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import FieldTrajectory, Grid, ScalarField

__all__ = ["CostOperator", "PotentialOperator", "combine_local_costs"]

STRICT_MONOTONE = "strict_monotone"
ANTI_MONOTONE = "anti_monotone"
NEITHER = "neither"


@dataclass(frozen=True, eq=False)
class CostOperator:
    """One of three cost families.

    local_power:          f(x, m) = a * m(x)**p + f0(x)
    nonlocal_affine:      f(x, m) = c0 + c1 * <w, m>   (spatially constant)
    local_affine_shifted: f(x, m) = base(x) + m(x) - m_ref(x)
    """

    kind: str
    grid: Grid
    a: float = 0.0
    p: float = 1.0
    f0: ScalarField | None = None
    c0: float = 0.0
    c1: float = 0.0
    weight: ScalarField | None = None
    base: ScalarField | None = None
    m_ref: ScalarField | None = None

    @staticmethod
    def local_power(grid: Grid, a: float, p: float, f0: ScalarField) -> "CostOperator":
        if p < 1:
            raise ValueError("exponent p must be >= 1")
        if f0.grid != grid:
            raise ValueError("f0 must live on the grid")
        return CostOperator(kind="local_power", grid=grid, a=float(a), p=float(p), f0=f0)

    @staticmethod
    def nonlocal_affine(grid: Grid, c0: float, c1: float, weight: ScalarField) -> "CostOperator":
        if weight.grid != grid:
            raise ValueError("weight must live on the grid")
        return CostOperator(kind="nonlocal_affine", grid=grid, c0=float(c0), c1=float(c1), weight=weight)

    @staticmethod
    def local_affine_shifted(grid: Grid, base: ScalarField, m_ref: ScalarField) -> "CostOperator":
        if base.grid != grid or m_ref.grid != grid:
            raise ValueError("base and m_ref must live on the grid")
        return CostOperator(kind="local_affine_shifted", grid=grid, base=base, m_ref=m_ref)

    @property
    def is_local(self) -> bool:
        return self.kind in ("local_power", "local_affine_shifted")

    @property
    def monotonicity(self) -> str:
        if self.kind == "local_power":
            if self.a > 0:
                return STRICT_MONOTONE
            if self.a < 0:
                return ANTI_MONOTONE
            return NEITHER
        if self.kind == "local_affine_shifted":
            return STRICT_MONOTONE
        w_nonneg = bool(np.all(self.weight.values >= 0))
        if w_nonneg and self.c1 > 0:
            return STRICT_MONOTONE
        if w_nonneg and self.c1 < 0:
            return ANTI_MONOTONE
        return NEITHER

    def evaluate(self, m_values: np.ndarray) -> np.ndarray:
        m_values = np.asarray(m_values, dtype=float)
        if self.kind == "local_power":
            return self.a * np.power(m_values, self.p) + self.f0.values
        if self.kind == "local_affine_shifted":
            return self.base.values + m_values - self.m_ref.values
        pairing = float(np.dot(self.weight.values, m_values)) * self.grid.cell_volume
        return np.full_like(m_values, self.c0 + self.c1 * pairing)

    def __call__(self, m: ScalarField) -> ScalarField:
        if m.grid != self.grid:
            raise ValueError("field must live on the cost's grid")
        return ScalarField(self.grid, self.evaluate(m.values))

    def on_trajectory(self, m: FieldTrajectory) -> FieldTrajectory:
        return FieldTrajectory(m.timegrid, tuple(self(s) for s in m.slices))

    def level_set(self, c: np.ndarray) -> np.ndarray | None:
        """Per-node tau >= 0 with f(x, tau) = c(x), for local kinds.

        Nodes where f(x, 0) >= c get 0 (no mass supports that level);
        nodes where the level is unreachable for any m >= 0 get +inf.
        Returns None for nonlocal costs, which have no nodal level set.
        """
        if not self.is_local:
            return None
        c = np.asarray(c, dtype=float)
        if self.kind == "local_affine_shifted":
            return np.maximum(self.m_ref.values - self.base.values + c, 0.0)
        f0 = self.f0.values
        out = np.zeros(self.grid.n_total)
        if self.a > 0:
            reach = c > f0
            out[reach] = np.power((c[reach] - f0[reach]) / self.a, 1.0 / self.p)
        elif self.a < 0:
            reach = c < f0
            out[reach] = np.power((c[reach] - f0[reach]) / self.a, 1.0 / self.p)
            out[c > f0] = np.inf
        else:
            out[c > f0] = np.inf
        return out

    def zero_crossing(self) -> np.ndarray | None:
        """Per-node m0 >= 0 with f(x, m0) = 0 (level_set at level 0)."""
        if not self.is_local:
            return None
        return self.level_set(np.zeros(self.grid.n_total))

    def derivative(self, m_values: np.ndarray) -> np.ndarray | None:
        """Nodewise df/dm for local kinds (None for nonlocal)."""
        if not self.is_local:
            return None
        m_values = np.asarray(m_values, dtype=float)
        if self.kind == "local_affine_shifted":
            return np.ones_like(m_values)
        if self.p == 1.0:
            return np.full_like(m_values, self.a)
        return self.a * self.p * np.power(np.maximum(m_values, 0.0), self.p - 1.0)

    def potential(self) -> "PotentialOperator | None":
        """Antiderivative in m, when one exists in closed form."""
        if self.kind == "local_power":
            return PotentialOperator(self)
        if self.kind == "local_affine_shifted":
            return PotentialOperator(self)
        return None


@dataclass(frozen=True, eq=False)
class PotentialOperator:
    """Nodal antiderivative F with dF/dm = f, for local costs."""

    cost: CostOperator

    def __post_init__(self):
        if not self.cost.is_local:
            raise ValueError("potentials exist only for local costs")

    @property
    def grid(self) -> Grid:
        return self.cost.grid

    def evaluate(self, m_values: np.ndarray) -> np.ndarray:
        m_values = np.asarray(m_values, dtype=float)
        c = self.cost
        if c.kind == "local_power":
            return c.a * np.power(m_values, c.p + 1) / (c.p + 1) + c.f0.values * m_values
        return c.base.values * m_values + 0.5 * (m_values - c.m_ref.values) ** 2

    def derivative(self, m_values: np.ndarray) -> np.ndarray:
        return self.cost.evaluate(m_values)

    def second_derivative(self, m_values: np.ndarray) -> np.ndarray:
        m_values = np.asarray(m_values, dtype=float)
        c = self.cost
        if c.kind == "local_power":
            if c.p == 1.0:
                return np.full_like(m_values, c.a)
            return c.a * c.p * np.power(np.maximum(m_values, 0.0), c.p - 1)
        return np.ones_like(m_values)

    def total(self, m: ScalarField) -> float:
        """Integral of F(x, m(x)) over the domain."""
        return float(np.sum(self.evaluate(m.values)) * self.grid.cell_volume)


class _CombinedLocalCost:
    """Sum of local costs plus an optional fixed nodal shift.

    Internal helper for the evolutive and controlled systems, where the
    contact condition involves f(m) + g(m) or f(m) - H(x, 0).
    """

    def __init__(self, costs, shift: np.ndarray | None = None):
        self.costs = [c for c in costs if c is not None]
        if not self.costs:
            raise ValueError("need at least one cost")
        self.grid = self.costs[0].grid
        self.shift = np.zeros(self.grid.n_total) if shift is None else np.asarray(shift, dtype=float)
        self.is_local = all(c.is_local for c in self.costs)

    def evaluate(self, m_values: np.ndarray) -> np.ndarray:
        out = self.shift.copy()
        for c in self.costs:
            out = out + c.evaluate(m_values)
        return out

    def zero_crossing(self) -> np.ndarray | None:
        if not self.is_local:
            return None
        value_at_zero = self.evaluate(np.zeros(self.grid.n_total))
        out = np.zeros(self.grid.n_total)
        pending = value_at_zero < 0
        if not pending.any():
            return out
        # bracket the crossing nodewise, then bisect (all local costs here
        # are nondecreasing in m when used on mixed bands)
        hi = np.ones(self.grid.n_total)
        for _ in range(60):
            vals = self.evaluate(hi)
            need = pending & (vals < 0)
            if not need.any():
                break
            hi[need] *= 2.0
        still_neg = pending & (self.evaluate(hi) < 0)
        lo = np.zeros_like(hi)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            vmid = self.evaluate(mid)
            take_hi = vmid >= 0
            hi = np.where(take_hi, mid, hi)
            lo = np.where(take_hi, lo, mid)
        out[pending] = 0.5 * (lo + hi)[pending]
        out[still_neg] = np.inf
        return out


def combine_local_costs(*costs, shift: np.ndarray | None = None) -> _CombinedLocalCost:
    return _CombinedLocalCost(costs, shift)
