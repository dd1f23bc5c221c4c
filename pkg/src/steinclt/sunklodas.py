"""Seven-term decomposition of the normal-comparison bilinear form.

For W = sum_n Y^n with centered rows Y^n = b^{-1} fbar^n, the quantity
mu[ tr(Sigma D^2 A(W)) - W . grad A(W) ] with Sigma = mu(W W^T) splits, for
any C^2 function A, into seven terms built from punctured sums

    W^{n,m} = W - sum_{|i-n|<=m} Y^i,   Y^{n,m} = sum_{|i-n|=m} Y^i,

and Hessian increments delta^{n,m}(u) = D^2A(W^{n,m} + u Y^{n,m}) -
D^2A(W^{n,m}), delta^{n,k} = delta^{n,k}(1).  The split is exact given exact
expectations, exact centering, and exact segment integrals in the first two
terms; `decompose` reports all terms, the direct left-hand side, and the
residual of the identity.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .linalg import DegenerateCovariance
from .quadrature import gauss_legendre_01
from .stein import TestFunction, g_h_evaluate, g_h_norm_probe

__all__ = [
    "EnsembleMatrix",
    "punctured_sums",
    "delta_matrix",
    "DecompositionLedger",
    "decompose",
    "rho_geometric",
    "rho_intermittent",
    "ConditionReport",
    "estimate_condition_a1",
    "estimate_condition_a2",
    "estimate_condition_a3",
]


@dataclass
class EnsembleMatrix:
    """Centered observable rows for S samples, N time slots, d components.

    `values[s, i]` holds fbar^i for sample s (already centered); `b` is the
    normalization matrix so Y^i = b^{-1} fbar^i.  `weights`, when given,
    turn ensemble means into exact expectations over a finite sample space
    (the `exact` flag); otherwise means are uniform Monte Carlo averages.
    """

    values: np.ndarray
    b: np.ndarray
    bound: float
    weights: np.ndarray | None = None
    time_means: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3:
            raise ValueError("values must have shape (samples, times, components)")
        self.values = v
        self.b = np.asarray(self.b, dtype=float)
        d = v.shape[2]
        if self.b.shape != (d, d):
            raise ValueError("b must be d x d")
        if np.linalg.cond(self.b) > 1e12:
            raise ValueError("normalization matrix is numerically singular")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (v.shape[0],) or np.any(w < 0):
                raise ValueError("weights must be nonnegative, one per sample")
            total = w.sum()
            if not math.isfinite(total) or total <= 0:
                raise ValueError("weights must have positive total mass")
            self.weights = w / total
        norms = np.linalg.norm(v, axis=2)
        if norms.size and float(norms.max()) > 2.0 * self.bound + 1e-9:
            raise ValueError("centered values exceed twice the declared bound")
        mean = self._mean_over_samples(v)
        scale = max(1.0, 2.0 * self.bound)
        if float(np.abs(mean).max(initial=0.0)) > 3.0 * scale / math.sqrt(v.shape[0]) + 1e-10:
            raise ValueError("rows are not centered")
        self._b_inv = np.linalg.inv(self.b)

    @classmethod
    def from_raw(
        cls,
        raw: np.ndarray,
        b: np.ndarray,
        bound: float,
        weights: np.ndarray | None = None,
    ) -> "EnsembleMatrix":
        """Center raw observable values by their (weighted) ensemble means."""
        raw = np.asarray(raw, dtype=float)
        if weights is None:
            means = raw.mean(axis=0)
        else:
            w = np.asarray(weights, dtype=float)
            means = np.einsum("s,sid->id", w / w.sum(), raw)
        return cls(raw - means[None], b, bound, weights, time_means=means)

    # -- shapes ------------------------------------------------------------
    @property
    def samples(self) -> int:
        return self.values.shape[0]

    @property
    def times(self) -> int:
        return self.values.shape[1]

    @property
    def dimension(self) -> int:
        return self.values.shape[2]

    @property
    def exact(self) -> bool:
        return self.weights is not None

    @property
    def b_inv(self) -> np.ndarray:
        return self._b_inv

    def _mean_over_samples(self, arr: np.ndarray) -> np.ndarray:
        if self.weights is None:
            return arr.mean(axis=0)
        return np.einsum("s,s...->...", self.weights, arr)

    def with_normalization(self, b: np.ndarray) -> "EnsembleMatrix":
        return EnsembleMatrix(self.values, b, self.bound, self.weights, self.time_means)

    # -- sums --------------------------------------------------------------
    def y_values(self) -> np.ndarray:
        """Y rows, shape (S, N, d)."""
        return self.values @ self._b_inv.T

    def w_sums(self) -> np.ndarray:
        return self.y_values().sum(axis=1)

    def w_covariance(self) -> np.ndarray:
        w = self.w_sums()
        return self._mean_over_samples(np.einsum("sa,sb->sab", w, w))


def _window(cum: np.ndarray, n: int, m: int) -> np.ndarray:
    """sum over |i-n| <= m of rows, from a cumulative sum along axis -2."""
    last = cum.shape[-2] - 1
    hi = min(n + m, last)
    lo = n - m - 1
    out = cum[..., hi, :].copy()
    if lo >= 0:
        out -= cum[..., lo, :]
    return out


def punctured_sums(y_rows: np.ndarray, n: int, m: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(W, W^{n,m}, Y^{n,m}) for one sample row or a stack of rows.

    m = -1 returns (W, W, 0); m = N-1 always gives W^{n,m} = 0.
    """
    y = np.asarray(y_rows, dtype=float)
    single = y.ndim == 2
    if single:
        y = y[None]
    big_n = y.shape[1]
    if not (0 <= n < big_n):
        raise IndexError("time index n outside 0..N-1")
    if not (-1 <= m <= big_n - 1):
        raise IndexError("puncture radius m outside -1..N-1")
    w = y.sum(axis=1)
    if m == -1:
        wnm = w.copy()
        ynm = np.zeros_like(w)
    else:
        cum = np.cumsum(y, axis=1)
        wnm = w - _window(cum, n, m)
        if m == 0:
            ynm = y[:, n].copy()
        else:
            ynm = np.zeros_like(w)
            if n - m >= 0:
                ynm += y[:, n - m]
            if n + m <= big_n - 1:
                ynm += y[:, n + m]
    if single:
        return w[0], wnm[0], ynm[0]
    return w, wnm, ynm


def delta_matrix(solution, y_row: np.ndarray, n: int, k: int, u: float = 1.0) -> np.ndarray:
    """delta^{n,k}(u) = D^2A(W^{n,k} + u Y^{n,k}) - D^2A(W^{n,k}) for one row."""
    if not (0.0 <= u <= 1.0):
        raise ValueError("u must lie in [0, 1]")
    _, wnk, ynk = punctured_sums(y_row, n, k)
    pts = np.stack([wnk + u * ynk, wnk])
    h = np.asarray(solution.hessian(pts))
    return h[0] - h[1]


@dataclass(frozen=True)
class DecompositionLedger:
    """Values and standard errors of E1..E7, the direct LHS, and the residual."""

    terms: dict
    lhs: tuple[float, float]
    samples: int
    exact: bool
    u_order: int

    @property
    def term_sum(self) -> float:
        return float(sum(v for v, _ in self.terms.values()))

    @property
    def residual(self) -> float:
        return self.lhs[0] - self.term_sum

    @property
    def combined_stderr(self) -> float:
        return math.sqrt(self.lhs[1] ** 2 + sum(se**2 for _, se in self.terms.values()))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["term", "value", "stderr"])
            for name, (val, se) in self.terms.items():
                writer.writerow([name, repr(float(val)), repr(float(se))])
            writer.writerow(["lhs", repr(float(self.lhs[0])), repr(float(self.lhs[1]))])
            writer.writerow(["residual", repr(float(self.residual)), ""])


def _mean_and_stderr(contrib: np.ndarray, weights: np.ndarray | None, exact: bool) -> tuple[float, float]:
    if weights is None:
        mean = float(contrib.mean())
        n = contrib.size
        se = float(contrib.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    else:
        mean = float(weights @ contrib)
        se = 0.0 if exact else float(math.sqrt(np.sum(weights**2 * (contrib - mean) ** 2)))
    return mean, 0.0 if exact else se


def decompose(
    ens: EnsembleMatrix,
    solution,
    u_order: int = 8,
    sigma: np.ndarray | None = None,
    memory_budget: int = 200_000_000,
) -> DecompositionLedger:
    """Estimate E1..E7 and the direct LHS for the given C^2 function.

    `solution` needs `gradient` and `hessian` evaluators accepting (..., d)
    stacks; when it also carries a `sigma` attribute, that matrix must agree
    with the empirical mu(W W^T) (the identity only holds for the
    self-consistent Sigma).  E1/E2 segment integrals use `u_order`-point
    Gauss-Legendre.  Means are exact when the ensemble carries weights.
    """
    s_count, big_n, d = ens.samples, ens.times, ens.dimension
    y = ens.y_values()
    w = y.sum(axis=1)
    weights = ens.weights
    sigma_emp = ens.w_covariance()
    eigs = np.linalg.eigvalsh(0.5 * (sigma_emp + sigma_emp.T))
    if float(eigs.min()) <= 1e-12:
        raise DegenerateCovariance(
            "empirical covariance of W is singular; increase N or the sample count"
        )
    if sigma is None:
        sigma = getattr(solution, "sigma", None)
    if sigma is not None:
        sigma = np.asarray(sigma, dtype=float)
        defect = float(np.abs(sigma - sigma_emp).max())
        if defect > 1e-8 * max(1.0, float(np.abs(sigma_emp).max())):
            raise ValueError(
                "solution Sigma disagrees with the empirical mu(W W^T); "
                "rebuild the solution from this ensemble"
            )
    sigma_use = sigma_emp

    if s_count * big_n * (big_n + 1) * d * d > memory_budget:
        raise ValueError("N^2 * S * d^2 exceeds the memory budget; reduce S or N")

    cum = np.cumsum(y, axis=1)
    # punctured sums W^{n,k} for k = -1..N-1 (storage index k+1)
    wnk = np.empty((s_count, big_n, big_n + 1, d))
    wnk[:, :, 0, :] = w[:, None, :]
    for n in range(big_n):
        for m in range(big_n):
            wnk[:, n, m + 1, :] = w - _window(cum, n, m)
    hnk = np.asarray(solution.hessian(wnk.reshape(-1, d))).reshape(
        s_count, big_n, big_n + 1, d, d
    )

    def ring(n: int, m: int) -> np.ndarray:
        if m == 0:
            return y[:, n]
        out = np.zeros((s_count, d))
        if n - m >= 0:
            out += y[:, n - m]
        if n + m <= big_n - 1:
            out += y[:, n + m]
        return out

    un, uw = gauss_legendre_01(u_order)

    e1 = np.zeros(s_count)
    e2 = np.zeros(s_count)
    for n in range(big_n):
        for m in range(big_n):
            if m >= 1 and (n - m < 0) and (n + m > big_n - 1):
                continue                      # empty ring, zero contribution
            ynm = ring(n, m)
            base = wnk[:, n, m + 1, :]
            seg = base[:, None, :] + un[None, :, None] * ynm[:, None, :]
            hseg = np.asarray(solution.hessian(seg.reshape(-1, d))).reshape(
                s_count, u_order, d, d
            )
            integ = np.einsum("q,sqab->sab", uw, hseg) - hnk[:, n, m + 1]
            contrib = np.einsum("sa,sab,sb->s", y[:, n], integ, ynm)
            if m == 0:
                e2 -= contrib
            else:
                e1 -= contrib

    # delta^{n,k} = H(W^{n,k-1}) - H(W^{n,k}), storage offset by one
    delta = hnk[:, :, :-1] - hnk[:, :, 1:]          # (S, N, N, d, d), axis 2 = k
    mean_delta = (
        np.einsum("s,snkab->nkab", weights, delta)
        if weights is not None
        else delta.mean(axis=0)
    )
    mean_delta_cum = np.cumsum(mean_delta, axis=1)   # sum over k' <= k

    e3 = np.zeros(s_count)
    e4 = np.zeros(s_count)
    e5 = np.zeros(s_count)
    e6 = np.zeros(s_count)
    e7 = np.zeros(s_count)
    for n in range(big_n):
        yn = y[:, n]
        for k in range(1, big_n):
            centered = delta[:, n, k] - mean_delta[n, k]
            e5 -= np.einsum("sa,sab,sb->s", yn, centered, yn)
        e7 += np.einsum("sa,ab,sb->s", yn, mean_delta[n, 0], yn)
        for m in range(1, big_n):
            ynm = ring(n, m)
            if not np.any(ynm):
                continue
            for k in range(m + 1, min(2 * m, big_n - 1) + 1):
                centered = delta[:, n, k] - mean_delta[n, k]
                e3 -= np.einsum("sa,sab,sb->s", yn, centered, ynm)
            for k in range(2 * m + 1, big_n):
                centered = delta[:, n, k] - mean_delta[n, k]
                e4 -= np.einsum("sa,sab,sb->s", yn, centered, ynm)
            e6 += np.einsum("sa,ab,sb->s", yn, mean_delta_cum[n, m], ynm)

    grad_w = np.asarray(solution.gradient(w))
    hess_w = hnk[:, 0, 0]                            # D^2A(W), shared across n
    lhs_contrib = np.einsum("ab,sba->s", sigma_use, hess_w) - np.einsum(
        "sa,sa->s", w, grad_w
    )

    exact = ens.exact
    terms = {
        name: _mean_and_stderr(arr, weights, exact)
        for name, arr in zip(
            ["E1", "E2", "E3", "E4", "E5", "E6", "E7"], [e1, e2, e3, e4, e5, e6, e7]
        )
    }
    lhs = _mean_and_stderr(lhs_contrib, weights, exact)
    return DecompositionLedger(terms, lhs, s_count, exact, u_order)


def rho_geometric(gamma: float) -> Callable[[int], float]:
    """Geometric decay envelope rho(m) = gamma^m."""
    if not (0.0 < gamma < 1.0):
        raise ValueError("gamma must lie in (0, 1)")
    return lambda m: float(gamma) ** int(m)


def rho_intermittent(beta_star: float) -> Callable[[int], float]:
    """Polynomial envelope m^(1 - 1/beta*) (log m)^(1/beta*), with rho(0) = rho(1) = 1."""
    if not (0.0 < beta_star < 1.0):
        raise ValueError("beta_star must lie in (0, 1)")

    def rho(m: int) -> float:
        m = int(m)
        if m <= 1:
            return 1.0
        return m ** (1.0 - 1.0 / beta_star) * math.log(m) ** (1.0 / beta_star)

    return rho


@dataclass(frozen=True)
class ConditionReport:
    kind: str
    value: float
    stderr: float
    envelope: float
    ratio: float
    details: dict = field(default_factory=dict)


def estimate_condition_a1(
    ens: EnsembleMatrix,
    n: int,
    m: int,
    comp_a: int,
    comp_b: int,
    rho: Callable[[int], float],
    c1: float = 1.0,
) -> ConditionReport:
    """|mu(fbar^n_a fbar^m_b)| against the envelope c1 * rho(|n - m|)."""
    big_n = ens.times
    if not (0 <= n < big_n and 0 <= m < big_n):
        raise IndexError("time indices outside 0..N-1")
    prod = ens.values[:, n, comp_a] * ens.values[:, m, comp_b]
    val, se = _mean_and_stderr(prod, ens.weights, ens.exact)
    envelope = c1 * rho(abs(n - m))
    return ConditionReport("A1", abs(val), se, envelope, abs(val) / envelope)


def _latin_hypercube(count: int, dims: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    out = np.empty((count, dims))
    for j in range(dims):
        perm = rng.permutation(count)
        out[:, j] = (perm + rng.random(count)) / count
    return out


def _stz_probes(dim: int, count: int, seed: int) -> list[tuple[float, float, np.ndarray]]:
    cube = _latin_hypercube(count, 2 + dim, seed)
    return [(float(row[0]), float(row[1]), 8.0 * row[2:] - 4.0) for row in cube]


def _norm_probe_args(ens: EnsembleMatrix, n: int, k: int, seed: int, count: int = 256):
    """Probe (x, y) arguments: realized punctured sums and ring values plus
    seeded draws from the ball of radius 4 * bound + 1."""
    rng = np.random.default_rng(seed)
    total = ens.values.sum(axis=1)
    cum = np.cumsum(ens.values, axis=1)
    xs_real = total - _window(cum, n, k)
    ring = np.zeros((ens.samples, ens.dimension))
    if k == 0:
        ring = ens.values[:, n]
    else:
        if n - k >= 0:
            ring += ens.values[:, n - k]
        if n + k <= ens.times - 1:
            ring += ens.values[:, n + k]
    take = min(count, ens.samples)
    idx = rng.choice(ens.samples, take, replace=False)
    radius = 4.0 * ens.bound + 1.0
    extra = rng.normal(size=(count, ens.dimension))
    extra *= (radius * rng.random(count) ** (1.0 / ens.dimension) / np.linalg.norm(extra, axis=1))[:, None]
    xs = np.concatenate([xs_real[idx], rng.normal(scale=max(1.0, ens.bound), size=(count, ens.dimension))])
    ys = np.concatenate([ring[idx], extra])
    return xs, ys


def _condition_a2_a3(
    ens: EnsembleMatrix,
    h: TestFunction,
    n: int,
    m: int,
    k: int,
    rho: Callable[[int], float],
    centered: bool,
    probe_count: int,
    seed: int,
) -> ConditionReport:
    big_n = ens.times
    if not (0 <= n < big_n):
        raise IndexError("n outside 0..N-1")
    if not (0 <= m <= k <= big_n - 1):
        raise ValueError("need 0 <= m <= k <= N-1")
    if centered and 2 * m > k:
        raise ValueError("the centered envelope needs 2m <= k")
    total = ens.values.sum(axis=1)
    cum = np.cumsum(ens.values, axis=1)
    x_arg = total - _window(cum, n, k)                 # sum over |i-n| > k
    ring_k = np.zeros((ens.samples, ens.dimension))
    if k == 0:
        ring_k = ens.values[:, n]
    else:
        if n - k >= 0:
            ring_k += ens.values[:, n - k]
        if n + k <= big_n - 1:
            ring_k += ens.values[:, n + k]
    ring_m = np.zeros((ens.samples, ens.dimension))
    if m == 0:
        ring_m = ens.values[:, n]
    else:
        if n - m >= 0:
            ring_m += ens.values[:, n - m]
        if n + m <= big_n - 1:
            ring_m += ens.values[:, n + m]
    fn = ens.values[:, n]
    xs_probe, ys_probe = _norm_probe_args(ens, n, k, seed + 1)
    lag = m if not centered else k - m
    envelope_rho = rho(lag)
    worst = None
    for s_val, t_val, z in _stz_probes(ens.dimension, probe_count, seed):
        g = g_h_evaluate(h, ens.b, s_val, t_val, z, x_arg, ring_k)
        if centered:
            g_mean = (
                np.einsum("s,sab->ab", ens.weights, g)
                if ens.weights is not None
                else g.mean(axis=0)
            )
            g = g - g_mean
        contrib = np.einsum("sa,sab,sb->s", fn, g, ring_m)
        val, se = _mean_and_stderr(contrib, ens.weights, ens.exact)
        sup_g, sup_grad = g_h_norm_probe(h, ens.b, s_val, t_val, z, xs_probe, ys_probe)
        denom = (sup_g + sup_grad) * envelope_rho
        if denom <= 0:
            continue
        ratio = abs(val) / denom
        if worst is None or ratio > worst[0]:
            worst = (ratio, abs(val), se, denom, (s_val, t_val))
    if worst is None:
        raise ValueError("all probes produced a zero envelope")
    ratio, val, se, denom, stz = worst
    return ConditionReport(
        "A3" if centered else "A2",
        val,
        se,
        denom,
        ratio,
        {"probe_s": stz[0], "probe_t": stz[1], "probes": probe_count},
    )


def estimate_condition_a2(
    ens: EnsembleMatrix,
    h: TestFunction,
    n: int,
    m: int,
    k: int,
    rho: Callable[[int], float],
    probe_count: int = 64,
    seed: int = 0,
) -> ConditionReport:
    """Spot-check the uncentered second-difference correlation envelope."""
    return _condition_a2_a3(ens, h, n, m, k, rho, False, probe_count, seed)


def estimate_condition_a3(
    ens: EnsembleMatrix,
    h: TestFunction,
    n: int,
    m: int,
    k: int,
    rho: Callable[[int], float],
    probe_count: int = 64,
    seed: int = 0,
) -> ConditionReport:
    """Spot-check the centered envelope (requires 2m <= k)."""
    return _condition_a2_a3(ens, h, n, m, k, rho, True, probe_count, seed)
