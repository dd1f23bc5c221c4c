"""Ulam discretization of transfer operators and density diagnostics.

The Ulam matrix on a uniform grid of G cells is P[i][j] = m(cell_i n
T^{-1} cell_j) / m(cell_i), assembled exactly from the monotone branch
structure of the map (analytic or root-solved branch inverses).  Densities
are carried as per-cell values of a step function; the mass vector is
values / G.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .dynamics import IntervalMap, Observable, PiecewiseLinearMap, trajectory

__all__ = [
    "UlamOperator",
    "DensityVector",
    "ConeReport",
    "ConvergenceError",
    "build_ulam",
    "invariant_density",
    "cone_check",
    "correlation_estimate",
    "variation_diagnostic",
]


class ConvergenceError(RuntimeError):
    """An iterative solve ran out of iterations before reaching tolerance."""


@dataclass(frozen=True)
class UlamOperator:
    """Row-stochastic sparse transition matrix on a uniform grid."""

    grid: int
    matrix: sp.csr_matrix

    def __post_init__(self):
        rowsum = np.asarray(self.matrix.sum(axis=1)).ravel()
        defect = float(np.abs(rowsum - 1.0).max())
        if defect > 1e-12:
            raise ValueError(f"rows must sum to 1 (defect {defect:.2e})")
        if self.matrix.nnz and self.matrix.data.min() < -1e-15:
            raise ValueError("negative transition mass")

    def push_masses(self, masses: np.ndarray) -> np.ndarray:
        """Adjoint action: one step of the cell-mass vector."""
        return np.asarray(masses @ self.matrix).ravel()


@dataclass(frozen=True)
class DensityVector:
    """Step-function density: values[i] on cell [i/G, (i+1)/G)."""

    grid: int
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if vals.shape != (self.grid,):
            raise ValueError("values must have shape (grid,)")
        if vals.size and float(vals.min()) < -1e-12:
            raise ValueError("density values must be nonnegative")

    @property
    def masses(self) -> np.ndarray:
        return self.values / self.grid

    @property
    def mass(self) -> float:
        return float(self.values.sum() / self.grid)

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.grid) + 0.5) / self.grid

    @classmethod
    def uniform(cls, grid: int) -> "DensityVector":
        return cls(grid, np.ones(grid))

    @classmethod
    def from_masses(cls, masses: np.ndarray) -> "DensityVector":
        masses = np.asarray(masses, dtype=float)
        return cls(masses.size, masses * masses.size)

    def normalized(self) -> "DensityVector":
        m = self.mass
        if m <= 0:
            raise ValueError("cannot normalize zero mass")
        return DensityVector(self.grid, self.values / m)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Inverse-CDF draws, piecewise linear within cells."""
        masses = self.masses
        total = masses.sum()
        if total <= 0:
            raise ValueError("cannot sample from zero mass")
        cmf = np.cumsum(masses) / total
        u = rng.random(size)
        idx = np.searchsorted(cmf, u, side="left")
        idx = np.clip(idx, 0, self.grid - 1)
        prev = np.where(idx > 0, cmf[idx - 1], 0.0)
        cell_mass = np.maximum(cmf[idx] - prev, 1e-300)
        frac = (u - prev) / cell_mass
        return (idx + np.clip(frac, 0.0, 1.0)) / self.grid

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["midpoint", "value"])
            for x, v in zip(self.midpoints, self.values):
                writer.writerow([repr(float(x)), repr(float(v))])


def build_ulam(imap: IntervalMap, grid: int) -> UlamOperator:
    """Assemble the Ulam matrix from the map's monotone branches.

    For each branch, the preimages of the cell edges partition the branch
    domain; sweeping the merged partition against the uniform grid gives the
    exact cell-to-cell mass split (each elementary interval lies in a single
    source cell and maps into a single target cell).
    """
    if grid < 2:
        raise ValueError("grid must have at least 2 cells")
    edges = np.arange(grid + 1) / grid
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    for branch in imap.branches():
        j0 = int(np.searchsorted(edges, branch.image_lo, side="right") - 1)
        j1 = int(np.searchsorted(edges, branch.image_hi, side="left"))
        ys = np.clip(edges[j0 : j1 + 1], branch.image_lo, branch.image_hi)
        xs = np.asarray(branch.invert(ys), dtype=float)
        xs[0], xs[-1] = branch.lo, branch.hi
        xs = np.maximum.accumulate(np.clip(xs, branch.lo, branch.hi))
        interior = edges[(edges > branch.lo) & (edges < branch.hi)]
        cuts = np.union1d(xs, interior)
        widths = np.diff(cuts)
        keep = widths > 0
        mids = 0.5 * (cuts[:-1] + cuts[1:])[keep]
        widths = widths[keep]
        i_idx = np.minimum((mids * grid).astype(int), grid - 1)
        j_idx = j0 + np.clip(np.searchsorted(xs, mids, side="right") - 1, 0, len(xs) - 2)
        rows.append(i_idx)
        cols.append(j_idx)
        vals.append(widths * grid)          # mass / cell width
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid, grid),
    ).tocsr()
    mat.sum_duplicates()
    return UlamOperator(grid, mat)


def invariant_density(
    op: UlamOperator,
    tol: float = 1e-12,
    max_iter: int = 500_000,
    initial: DensityVector | None = None,
) -> DensityVector:
    """Fixed point of the adjoint action by power iteration.

    Iterates the cell-mass vector until the successive L1 difference drops
    below `tol`; raises ConvergenceError with the residual otherwise.
    """
    pt = op.matrix.T.tocsr()
    v = (initial.normalized().masses if initial is not None else np.full(op.grid, 1.0 / op.grid))
    for _ in range(max_iter):
        v2 = pt @ v
        diff = float(np.abs(v2 - v).sum())
        v = v2
        if diff < tol:
            v = np.maximum(v, 0.0)
            v /= v.sum()
            return DensityVector.from_masses(v)
    raise ConvergenceError(f"power iteration stalled at L1 difference {diff:.2e}")


@dataclass(frozen=True)
class ConeReport:
    """Margins for membership in the decreasing cone with exponent alpha.

    Margins are worst-case over adjacent midpoints; a nonnegative margin
    means the property holds, and small negatives within `tol` (one cell of
    discretization slack by default) still pass.
    """

    alpha: float
    tol: float
    decreasing_margin: float
    power_increasing_margin: float
    pointwise_bound_margin: float

    @property
    def decreasing_ok(self) -> bool:
        return self.decreasing_margin >= -self.tol

    @property
    def power_increasing_ok(self) -> bool:
        return self.power_increasing_margin >= -self.tol

    @property
    def pointwise_bound_ok(self) -> bool:
        return self.pointwise_bound_margin >= -self.tol

    @property
    def passed(self) -> bool:
        return self.decreasing_ok and self.power_increasing_ok and self.pointwise_bound_ok


def cone_check(h: DensityVector, alpha: float, tol: float | None = None) -> ConeReport:
    """Check the three cone properties of a density on cell midpoints.

    (i) decreasing, (ii) x^(alpha+1) h(x) increasing, (iii) h(x) <=
    2^alpha (2+alpha) x^(-alpha) * mass.  Comparisons are between adjacent
    cells only.
    """
    x = h.midpoints
    f = h.values
    g = x ** (alpha + 1.0) * f
    envelope = 2.0**alpha * (2.0 + alpha) * x ** (-alpha) * h.mass
    dec = float((f[:-1] - f[1:]).min()) if h.grid > 1 else 0.0
    pow_inc = float((g[1:] - g[:-1]).min()) if h.grid > 1 else 0.0
    bound = float((envelope - f).min())
    if tol is None:
        tol = 1.0 / h.grid
    return ConeReport(alpha, tol, dec, pow_inc, bound)


def correlation_estimate(
    seq,
    f: Observable,
    g: Observable,
    n: int,
    m: int,
    mu0: DensityVector | None,
    samples: int,
    seed: int,
) -> tuple[float, float]:
    """Monte Carlo estimate of Cov(f(y_n), g(y_m)) under mu0 x dynamics.

    Both observables must be scalar.  Centering uses the plug-in ensemble
    means.  Returns (value, standard error).
    """
    if f.dimension != 1 or g.dimension != 1:
        raise ValueError("correlation_estimate expects scalar observables")
    if samples < 1000:
        raise ValueError("need at least 1000 samples")
    if n < 0 or m < 0:
        raise IndexError("time indices must be nonnegative")
    rng = np.random.default_rng(seed)
    x0 = mu0.sample(rng, samples) if mu0 is not None else rng.random(samples)
    horizon = max(n, m)
    orbit = trajectory(seq, x0, horizon)
    fv = f(orbit[n])[:, 0]
    gv = g(orbit[m])[:, 0]
    prod = (fv - fv.mean()) * (gv - gv.mean())
    value = float(prod.mean())
    stderr = float(prod.std(ddof=1) / np.sqrt(samples))
    return value, stderr


def variation_diagnostic(maps: list[PiecewiseLinearMap], max_branches: int = 500_000) -> float:
    """Total variation over [0,1] of 1/|(T_n o ... o T_1)'|, computed exactly.

    The composed derivative is constant on every branch of the composition,
    so each per-branch variation vanishes and the total reduces to summing
    the jumps at interior branch boundaries.  Families with a single global
    slope per map therefore return exactly 0.0.
    """
    for m in maps:
        if not isinstance(m, PiecewiseLinearMap):
            raise TypeError("variation diagnostic supports piecewise linear maps only")
    # pieces are (a, b, s, off): the composition so far is x -> s x + off on [a, b)
    pieces = [(0.0, 1.0, 1.0, 0.0)]
    for m in maps:
        nxt: list[tuple[float, float, float, float]] = []
        branches = m.branches()
        for a, b, s, off in pieces:
            c, d = s * a + off, s * b + off
            for br in branches:
                # the composition image (c, d) is cut by the branch domains of m
                lo = max(c, br.lo)
                hi = min(d, br.hi)
                if hi - lo <= 1e-15:
                    continue
                a2 = (lo - off) / s
                b2 = (hi - off) / s
                k = br.slope * br.lo - br.image_lo
                nxt.append((a2, b2, s * br.slope, br.slope * off - k))
        pieces = nxt
        if len(pieces) > max_branches:
            raise ValueError("branch count exceeds the supported budget")
    pieces.sort(key=lambda p: p[0])
    recip = [1.0 / abs(s) for _, _, s, _ in pieces]
    return float(sum(abs(u - v) for u, v in zip(recip[1:], recip[:-1])))
