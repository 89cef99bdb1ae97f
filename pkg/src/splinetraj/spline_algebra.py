"""Closed algebra over B-splines with arbitrary degrees and knot vectors.

Addition and multiplication construct a common basis (knot union with
multiplicities raised until the result is exactly representable), sample the
pointwise sum/product at collocation sites, and recover coefficients by least
squares.  The fit residual is checked against a tolerance so a silent
approximation can never leak into constraint formulations built on top.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bspline import BSpline, KnotVector, basis_matrix

__all__ = [
    "RefitConfig",
    "RefitError",
    "NumericalError",
    "knot_union",
    "elevated_union",
    "collocation_sites",
    "FitOperator",
    "refit",
    "add",
    "multiply",
    "linear_combination",
    "scale",
]


class RefitError(RuntimeError):
    """Least-squares refit residual exceeded the configured tolerance."""

    def __init__(self, op: str, worst_tau: float, worst_residual: float, tolerance: float):
        super().__init__(
            f"{op}: refit residual {worst_residual:.3e} at tau={worst_tau:.6f} "
            f"exceeds tolerance {tolerance:.3e}"
        )
        self.worst_tau = worst_tau
        self.worst_residual = worst_residual
        self.tolerance = tolerance


class NumericalError(RuntimeError):
    """Rank-deficient or otherwise unusable least-squares system."""


@dataclass(frozen=True)
class RefitConfig:
    """Controls the collocation density and accepted residual of refits.

    samples_per_span of None selects 4*(p+1) samples for a degree-p target
    basis, which oversamples every polynomial piece 4x.
    """

    samples_per_span: int | None = None
    residual_tolerance: float = 1e-8

    def __post_init__(self):
        if self.samples_per_span is not None and self.samples_per_span < 2:
            raise ValueError("samples_per_span must be at least 2")
        if self.residual_tolerance <= 0.0:
            raise ValueError("residual_tolerance must be positive")

    def spans_samples(self, degree: int) -> int:
        s = self.samples_per_span if self.samples_per_span is not None else 4 * (degree + 1)
        if s < degree + 1:
            raise ValueError(
                f"samples_per_span = {s} underdetermines a degree-{degree} fit"
            )
        return s


DEFAULT_CONFIG = RefitConfig()


def _check_normalized(knots: KnotVector) -> None:
    if knots.first != 0.0 or knots.last != 1.0:
        raise ValueError("knot vector must be normalized to [0, 1]")


def knot_union(u1: KnotVector, u2: KnotVector, degree: int) -> KnotVector:
    """Merge two knot vectors for a result spline of the given degree.

    Each distinct value keeps the larger of its two multiplicities; the end
    knots are then raised to multiplicity degree+1 for clamping.
    """
    _check_normalized(u1)
    _check_normalized(u2)
    values = {}
    for kv in (u1, u2):
        for v in kv.distinct():
            values[float(v)] = max(values.get(float(v), 0), kv.multiplicity(v))
    values[0.0] = max(values.get(0.0, 0), degree + 1)
    values[1.0] = max(values.get(1.0, 0), degree + 1)
    merged = np.concatenate(
        [np.full(m, v) for v, m in sorted(values.items())]
    )
    out = KnotVector(merged)
    out.validate_for_degree(degree)
    return out


def elevated_union(
    inputs: list[tuple[KnotVector, int]], target_degree: int
) -> KnotVector:
    """Knot vector on which sums/products of the inputs are exactly representable.

    A knot of multiplicity k in a degree-p input leaves the input C^{p-k}
    there; representing that smoothness at degree p3 needs multiplicity
    k + (p3 - p).  Taking the maximum over the inputs covers both addition
    (p3 = max p_i) and multiplication (p3 = sum p_i).
    """
    values: dict[float, int] = {}
    for knots, degree in inputs:
        _check_normalized(knots)
        if degree > target_degree:
            raise ValueError("input degree exceeds target degree")
        lift = target_degree - degree
        for v in knots.interior_distinct():
            v = float(v)
            mult = knots.multiplicity(v) + lift
            values[v] = max(values.get(v, 0), mult)
    values = {v: min(m, target_degree + 1) for v, m in values.items()}
    values[0.0] = target_degree + 1
    values[1.0] = target_degree + 1
    merged = np.concatenate(
        [np.full(m, v) for v, m in sorted(values.items())]
    )
    return KnotVector(merged)


def collocation_sites(
    knots: KnotVector, degree: int, samples_per_span: int
) -> np.ndarray:
    """Uniform collocation sites per knot span, endpoints included, deduplicated."""
    breaks = knots.distinct()
    pieces = [
        np.linspace(a, b, samples_per_span)
        for a, b in zip(breaks[:-1], breaks[1:])
        if b > a
    ]
    return np.unique(np.concatenate(pieces))


class FitOperator:
    """Precomputed least-squares fit of sampled values onto a fixed basis.

    The economy SVD of the collocation matrix is stored and applied in
    factored form, which keeps full solve accuracy at high degree (an
    explicitly multiplied-out pseudoinverse loses ~cond*eps) while staying
    linear in the sampled values with an exact adjoint.
    """

    def __init__(self, degree: int, knots: KnotVector, taus: np.ndarray):
        B = basis_matrix(knots, degree, taus)
        n_coeff = B.shape[1]
        if B.shape[0] < n_coeff:
            raise NumericalError(
                f"{B.shape[0]} samples underdetermine {n_coeff} coefficients"
            )
        U, s, Vt = np.linalg.svd(B, full_matrices=False)
        if s[-1] <= s[0] * np.finfo(float).eps * max(B.shape):
            raise NumericalError(
                f"collocation matrix numerically rank deficient "
                f"(condition {s[0] / max(s[-1], np.finfo(float).tiny):.3e})"
            )
        self.degree = degree
        self.knots = knots
        self.taus = taus
        self.matrix = B
        self._U = U
        self._s = s
        self._Vt = Vt
        self.condition = float(s[0] / s[-1])

    @property
    def n_coefficients(self) -> int:
        return self.matrix.shape[1]

    def fit_coefficients(self, values: np.ndarray) -> np.ndarray:
        """Least-squares coefficients, shape (n_coefficients, d)."""
        vals = np.asarray(values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        return self._Vt.T @ ((self._U.T @ vals) / self._s[:, None])

    def adjoint_apply(self, weights: np.ndarray) -> np.ndarray:
        """Transpose of the fit map: maps coefficient weights to site weights."""
        w = np.asarray(weights, dtype=float)
        if w.ndim == 1:
            return self._U @ ((self._Vt @ w) / self._s)
        return self._U @ ((self._Vt @ w) / self._s[:, None])

    def fit(self, values: np.ndarray) -> tuple[BSpline, float]:
        """Fit sampled values; returns the spline and its max pointwise residual."""
        vals = np.asarray(values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        coeffs = self.fit_coefficients(vals)
        resid = np.abs(self.matrix @ coeffs - vals)
        return BSpline(self.degree, self.knots, coeffs), float(resid.max())

    def worst_residual_site(self, values: np.ndarray, coeffs: np.ndarray) -> tuple[float, float]:
        vals = np.asarray(values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        resid = np.abs(self.matrix @ coeffs - vals)
        idx = int(np.argmax(resid.max(axis=1)))
        return float(self.taus[idx]), float(resid[idx].max())


def _fit_operator_for(degree: int, knots: KnotVector, cfg: RefitConfig) -> FitOperator:
    taus = collocation_sites(knots, degree, cfg.spans_samples(degree))
    return FitOperator(degree, knots, taus)


def refit(taus, values, degree: int, knots: KnotVector) -> tuple[BSpline, float]:
    """Least-squares fit of sampled function values onto a given basis.

    Args:
        taus: Collocation parameters.
        values: Function samples, shape (m,) or (m, d).
        degree: Target basis degree.
        knots: Target knot vector.

    Returns:
        (fitted spline, max pointwise residual over the samples).
    """
    op = FitOperator(degree, knots, np.asarray(taus, dtype=float))
    return op.fit(values)


def _binary_op(s1: BSpline, s2: BSpline, cfg: RefitConfig, op: str) -> BSpline:
    if s1.domain != (0.0, 1.0) or s2.domain != (0.0, 1.0):
        raise ValueError("spline algebra requires the normalized domain [0, 1]")
    if op == "add":
        if s1.dim != s2.dim:
            raise ValueError(f"cannot add splines of dimension {s1.dim} and {s2.dim}")
        p3 = max(s1.degree, s2.degree)
    else:
        if s1.dim != 1 and s2.dim != 1:
            raise ValueError("multiply needs at least one scalar-valued operand")
        p3 = s1.degree + s2.degree
    knots3 = elevated_union(
        [(s1.knots, s1.degree), (s2.knots, s2.degree)], p3
    )
    fit_op = _fit_operator_for(p3, knots3, cfg)
    v1 = s1.eval(fit_op.taus)
    v2 = s2.eval(fit_op.taus)
    target = v1 + v2 if op == "add" else v1 * v2
    result, resid = fit_op.fit(target)
    if resid > cfg.residual_tolerance:
        tau, worst = fit_op.worst_residual_site(target, result.control_points)
        raise RefitError(op, tau, worst, cfg.residual_tolerance)
    return result


def add(s1: BSpline, s2: BSpline, cfg: RefitConfig = DEFAULT_CONFIG) -> BSpline:
    """Pointwise sum of two splines as a spline of degree max(p1, p2).

    Splines sharing a basis are added coefficientwise (exact); otherwise the
    sum is refit on the merged basis and the residual is checked.
    """
    if s1.same_basis(s2):
        if s1.dim != s2.dim:
            raise ValueError(f"cannot add splines of dimension {s1.dim} and {s2.dim}")
        return BSpline(s1.degree, s1.knots, s1.control_points + s2.control_points)
    return _binary_op(s1, s2, cfg, "add")


def multiply(s1: BSpline, s2: BSpline, cfg: RefitConfig = DEFAULT_CONFIG) -> BSpline:
    """Pointwise product as a spline of degree p1 + p2.

    One operand may be vector-valued provided the other is scalar; the
    scalar multiplies every coordinate.
    """
    return _binary_op(s1, s2, cfg, "multiply")


def linear_combination(splines: list[BSpline], weights) -> BSpline:
    """Exact weighted sum of splines that share one basis."""
    if not splines:
        raise ValueError("need at least one spline")
    base = splines[0]
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(splines),):
        raise ValueError("one weight per spline required")
    total = np.zeros_like(base.control_points)
    for s, wi in zip(splines, w):
        if not s.same_basis(base):
            raise ValueError("linear_combination requires a shared basis")
        if s.dim != base.dim:
            raise ValueError("dimension mismatch")
        total = total + wi * s.control_points
    return BSpline(base.degree, base.knots, total)


def scale(s: BSpline, factor: float) -> BSpline:
    """Exact scalar multiple of a spline."""
    return BSpline(s.degree, s.knots, factor * s.control_points)
