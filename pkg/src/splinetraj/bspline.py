"""Clamped B-spline curves on the normalized parameter interval [0, 1].

Provides knot vectors, Cox-de Boor basis evaluation, spline evaluation,
closed-form derivatives, and the coefficient bounding box that backs all
convex-hull constraint relaxations elsewhere in the package.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DomainError",
    "DegreeError",
    "KnotVector",
    "BSpline",
    "HullBounds",
    "eval_basis",
    "basis_matrix",
    "clamp_knots",
    "hull_bounds",
]


class DomainError(ValueError):
    """Parameter value outside the spline's knot domain."""


class DegreeError(ValueError):
    """Operation undefined for the spline's degree."""


class KnotVector:
    """Non-decreasing sequence of knot values.

    Immutable; the backing array is read-only after construction.
    """

    __slots__ = ("values",)

    def __init__(self, values):
        arr = np.array(values, dtype=float)
        if arr.ndim != 1:
            raise ValueError("knot vector must be one-dimensional")
        if arr.size < 2:
            raise ValueError("knot vector needs at least two entries")
        if not np.all(np.isfinite(arr)):
            raise ValueError("knot values must be finite")
        if np.any(np.diff(arr) < 0.0):
            raise ValueError("knot vector must be non-decreasing")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    def __setattr__(self, name, value):
        raise AttributeError("KnotVector is immutable")

    def __len__(self):
        return self.values.size

    def __getitem__(self, idx):
        return self.values[idx]

    def __iter__(self):
        return iter(self.values)

    def __eq__(self, other):
        if not isinstance(other, KnotVector):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(
            np.all(self.values == other.values)
        )

    def __hash__(self):
        return hash(self.values.tobytes())

    def __repr__(self):
        return f"KnotVector({self.values.tolist()})"

    @property
    def first(self) -> float:
        return float(self.values[0])

    @property
    def last(self) -> float:
        return float(self.values[-1])

    def multiplicity(self, value: float) -> int:
        """Number of knots exactly equal to ``value``."""
        return int(np.count_nonzero(self.values == value))

    def distinct(self) -> np.ndarray:
        """Distinct knot values in increasing order."""
        return np.unique(self.values)

    def interior_distinct(self) -> np.ndarray:
        """Distinct knot values strictly inside the domain."""
        uniq = self.distinct()
        return uniq[(uniq > self.first) & (uniq < self.last)]

    def max_multiplicity(self) -> int:
        _, counts = np.unique(self.values, return_counts=True)
        return int(counts.max())

    def validate_for_degree(self, degree: int) -> None:
        """Check the multiplicity bound for a spline of the given degree."""
        if degree < 0:
            raise DegreeError("degree must be non-negative")
        if self.max_multiplicity() > degree + 1:
            raise ValueError(
                f"knot multiplicity {self.max_multiplicity()} exceeds degree+1 = {degree + 1}"
            )

    def is_clamped(self, degree: int) -> bool:
        return (
            self.multiplicity(self.first) == degree + 1
            and self.multiplicity(self.last) == degree + 1
        )


def clamp_knots(interior, degree: int) -> KnotVector:
    """Build a clamped knot vector on [0, 1] from interior knots.

    The first and last knots are repeated degree+1 times so the spline
    interpolates its end control points.

    Args:
        interior: Sorted knot values strictly inside (0, 1).
        degree: Spline degree.

    Returns:
        KnotVector ``[0]*(p+1) + interior + [1]*(p+1)``.
    """
    if degree < 0:
        raise DegreeError("degree must be non-negative")
    inner = np.asarray(interior, dtype=float)
    if inner.size and (np.any(inner <= 0.0) or np.any(inner >= 1.0)):
        raise ValueError("interior knots must lie strictly inside (0, 1)")
    if inner.size and np.any(np.diff(inner) < 0.0):
        raise ValueError("interior knots must be sorted")
    full = np.concatenate(
        [np.zeros(degree + 1), inner, np.ones(degree + 1)]
    )
    return KnotVector(full)


def _check_tau(knots: KnotVector, tau: float) -> None:
    if not (knots.first <= tau <= knots.last):
        raise DomainError(
            f"tau = {tau} outside knot domain [{knots.first}, {knots.last}]"
        )


def eval_basis(knots: KnotVector, i: int, degree: int, tau: float) -> float:
    """Evaluate the basis function B_{i,p}(tau) by the Cox-de Boor recursion.

    0/0 terms in the recursion evaluate to 0.  The half-open interval
    convention is closed on the right at the final knot, so the last basis
    function of a clamped spline evaluates to 1 there.

    Args:
        knots: Knot vector.
        i: Basis function index, 0 <= i <= len(knots) - degree - 2.
        degree: Basis degree p.
        tau: Evaluation parameter inside the knot domain.
    """
    if not isinstance(knots, KnotVector):
        knots = KnotVector(knots)
    u = knots.values
    n_basis = len(u) - degree - 1
    if not 0 <= i < n_basis:
        raise IndexError(f"basis index {i} invalid for {n_basis} functions")
    _check_tau(knots, tau)
    return _cox_de_boor(u, i, degree, float(tau), float(u[-1]))


def _cox_de_boor(u: np.ndarray, i: int, p: int, tau: float, end: float) -> float:
    if p == 0:
        if u[i] <= tau < u[i + 1]:
            return 1.0
        # Close the last nonempty interval on the right.
        if tau == end and u[i + 1] == end and u[i] < u[i + 1]:
            return 1.0
        return 0.0
    total = 0.0
    d1 = u[i + p] - u[i]
    if d1 > 0.0:
        total += (tau - u[i]) / d1 * _cox_de_boor(u, i, p - 1, tau, end)
    d2 = u[i + p + 1] - u[i + 1]
    if d2 > 0.0:
        total += (u[i + p + 1] - tau) / d2 * _cox_de_boor(u, i + 1, p - 1, tau, end)
    return total


def basis_matrix(knots: KnotVector, degree: int, taus) -> np.ndarray:
    """Evaluate all basis functions at many parameters at once.

    Same recursion as :func:`eval_basis`, vectorized over both the basis
    index and the parameter values.

    Returns:
        Array of shape (len(taus), n_basis) with entries B_{i,p}(tau_k).
    """
    if not isinstance(knots, KnotVector):
        knots = KnotVector(knots)
    u = knots.values
    t = np.atleast_1d(np.asarray(taus, dtype=float))
    if t.size and (t.min() < knots.first or t.max() > knots.last):
        raise DomainError("parameter values outside knot domain")
    m = len(u) - 1
    end = u[-1]
    tcol = t[:, None]
    left = u[:-1][None, :]
    right = u[1:][None, :]
    B = ((tcol >= left) & (tcol < right)).astype(float)
    closes = (u[1:] == end) & (u[:-1] < u[1:])
    if np.any(closes):
        B[:, closes] += (tcol == end).astype(float)
    for k in range(1, degree + 1):
        ncols = m - k
        d1 = u[k : k + ncols] - u[:ncols]
        d2 = u[k + 1 : k + 1 + ncols] - u[1 : 1 + ncols]
        with np.errstate(divide="ignore", invalid="ignore"):
            w1 = np.where(d1 > 0.0, (tcol - u[:ncols][None, :]) / d1, 0.0)
            w2 = np.where(
                d2 > 0.0, (u[k + 1 : k + 1 + ncols][None, :] - tcol) / d2, 0.0
            )
        B = w1 * B[:, :ncols] + w2 * B[:, 1 : 1 + ncols]
    return B


class HullBounds:
    """Per-coordinate bounding box of a spline's control points.

    By the convex hull property the spline graph never leaves this box.
    """

    __slots__ = ("lower", "upper")

    def __init__(self, lower, upper):
        lo = np.atleast_1d(np.asarray(lower, dtype=float)).copy()
        hi = np.atleast_1d(np.asarray(upper, dtype=float)).copy()
        if lo.shape != hi.shape:
            raise ValueError("lower/upper shape mismatch")
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def __setattr__(self, name, value):
        raise AttributeError("HullBounds is immutable")

    def contains(self, points, atol: float = 0.0) -> bool:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return bool(
            np.all(pts >= self.lower - atol) and np.all(pts <= self.upper + atol)
        )

    def __repr__(self):
        return f"HullBounds(lower={self.lower.tolist()}, upper={self.upper.tolist()})"


class BSpline:
    """B-spline curve S(tau) = sum_i c_i B_{i,p}(tau) in R^d.

    Control points are stored one per row.  Instances are immutable and safe
    to share between threads.
    """

    __slots__ = ("degree", "knots", "control_points")

    def __init__(self, degree: int, knots, control_points):
        if degree < 0:
            raise DegreeError("degree must be non-negative")
        if not isinstance(knots, KnotVector):
            knots = KnotVector(knots)
        coeffs = np.array(control_points, dtype=float)
        if coeffs.ndim == 1:
            coeffs = coeffs[:, None]
        if coeffs.ndim != 2 or coeffs.shape[1] < 1:
            raise ValueError("control points must form an (n+1, d) array")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("control points must be finite")
        expected = len(knots) - degree - 2
        if coeffs.shape[0] != expected + 1:
            raise ValueError(
                f"{coeffs.shape[0]} control points inconsistent with "
                f"{len(knots)} knots at degree {degree} (need {expected + 1})"
            )
        knots.validate_for_degree(degree)
        coeffs.flags.writeable = False
        object.__setattr__(self, "degree", int(degree))
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "control_points", coeffs)

    def __setattr__(self, name, value):
        raise AttributeError("BSpline is immutable")

    @property
    def dim(self) -> int:
        return self.control_points.shape[1]

    @property
    def n_coefficients(self) -> int:
        return self.control_points.shape[0]

    @property
    def domain(self) -> tuple[float, float]:
        return (self.knots.first, self.knots.last)

    def same_basis(self, other: "BSpline") -> bool:
        return self.degree == other.degree and self.knots == other.knots

    def basis(self, taus) -> np.ndarray:
        return basis_matrix(self.knots, self.degree, taus)

    def eval(self, taus):
        """Evaluate the curve.

        A scalar parameter returns a (d,) point; an array of m parameters
        returns an (m, d) array.
        """
        scalar = np.isscalar(taus) or (
            isinstance(taus, np.ndarray) and taus.ndim == 0
        )
        B = self.basis(taus)
        out = B @ self.control_points
        return out[0] if scalar else out

    def __call__(self, taus):
        return self.eval(taus)

    def derivative(self) -> "BSpline":
        """Spline of the first derivative with respect to tau.

        The new knot vector drops the first and last knots; coefficients are
        d_i = p (c_{i+1} - c_i) / (u_{i+p+1} - u_{i+1}), with d_i = 0 over
        zero-length knot spans.
        """
        p = self.degree
        if p == 0:
            raise DegreeError("cannot differentiate a degree-0 spline")
        if self.n_coefficients < 2:
            raise DegreeError("need at least two control points to differentiate")
        u = self.knots.values
        c = self.control_points
        spans = u[p + 1 : p + 1 + (c.shape[0] - 1)] - u[1 : c.shape[0]]
        diff = c[1:] - c[:-1]
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(spans[:, None] > 0.0, p * diff / spans[:, None], 0.0)
        return BSpline(p - 1, KnotVector(u[1:-1]), d)

    def hull_bounds(self) -> HullBounds:
        return HullBounds(
            self.control_points.min(axis=0), self.control_points.max(axis=0)
        )

    def component(self, j: int) -> "BSpline":
        """Scalar spline of coordinate j."""
        if not 0 <= j < self.dim:
            raise IndexError(f"component {j} out of range for dim {self.dim}")
        return BSpline(self.degree, self.knots, self.control_points[:, j : j + 1])

    def to_json(self) -> dict:
        """JSON object form: {degree, knots, control_points}."""
        return {
            "degree": self.degree,
            "knots": self.knots.values.tolist(),
            "control_points": self.control_points.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BSpline":
        return cls(obj["degree"], obj["knots"], obj["control_points"])

    @classmethod
    def constant(cls, value, degree: int = 0, knots: KnotVector | None = None) -> "BSpline":
        """Constant curve; by partition of unity every coefficient equals value."""
        if knots is None:
            knots = clamp_knots([], degree)
        point = np.atleast_1d(np.asarray(value, dtype=float))
        n = len(knots) - degree - 1
        return cls(degree, knots, np.tile(point, (n, 1)))

    def __repr__(self):
        return (
            f"BSpline(degree={self.degree}, n_coefficients={self.n_coefficients}, "
            f"dim={self.dim})"
        )


def hull_bounds(spline: BSpline) -> HullBounds:
    """Coefficient bounding box; contains S(tau) for every tau in the domain."""
    return spline.hull_bounds()
