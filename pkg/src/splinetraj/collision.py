"""Collision constraint generation.

Static obstacles are baked into a signed distance field queried at
collocation parameters with a Lipschitz-based margin; dynamic convex
obstacles get time-varying separating hyperplanes whose three constraint
families reduce, through the spline algebra and the convex hull property,
to sign conditions on control points of composed B-splines.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .bspline import BSpline
from .spline_algebra import DEFAULT_CONFIG, RefitConfig, add, multiply, scale

__all__ = [
    "ObstaclePrimitive",
    "SignedDistanceField",
    "OutOfBoundsError",
    "Hyperplane",
    "build_sdf",
    "sdf_query",
    "static_clearance_constraints",
    "hyperplane_constraints",
    "StaticClearanceConstraints",
    "HyperplaneConstraintSet",
    "save_sdf",
    "load_sdf",
    "point_box_distance",
    "box_sphere_distance",
]

SDF_MAGIC = b"SDF1"
EMPTY_FIELD_VALUE = 1e9


class OutOfBoundsError(ValueError):
    """Query point outside the field's sampled region."""


def _convex_face_planes(vertices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Outward face normals and offsets (n . x <= h) of a convex vertex set."""
    from scipy.spatial import ConvexHull

    hull = ConvexHull(vertices)
    eqs = hull.equations  # rows [n, -h] with n . x + (-h) <= 0
    normals = eqs[:, :-1]
    offsets = -eqs[:, -1]
    scales = np.linalg.norm(normals, axis=1)
    return normals / scales[:, None], offsets / scales


class ObstaclePrimitive:
    """Convex obstacle: sphere, axis-aligned box, or convex polytope.

    ``motion`` is an optional center trajectory over the normalized time
    domain [0, 1]; the shape translates rigidly along it.
    """

    def __init__(self, kind, *, center=None, radius=None, box_min=None,
                 box_max=None, vertices=None, motion: BSpline | None = None):
        self.kind = kind
        self.motion = motion
        if kind == "sphere":
            self.center = np.asarray(center, dtype=float)
            self.radius = float(radius)
            if self.radius <= 0.0:
                raise ValueError("sphere radius must be positive")
            self.dim = self.center.size
        elif kind == "box":
            self.box_min = np.asarray(box_min, dtype=float)
            self.box_max = np.asarray(box_max, dtype=float)
            if np.any(self.box_min >= self.box_max):
                raise ValueError("box min must be strictly below max componentwise")
            self.dim = self.box_min.size
        elif kind == "polytope":
            self.vertices_arr = np.asarray(vertices, dtype=float)
            d = self.vertices_arr.shape[1]
            if self.vertices_arr.shape[0] < d + 1:
                raise ValueError("polytope needs at least d+1 vertices")
            rel = self.vertices_arr[1:] - self.vertices_arr[0]
            if np.linalg.matrix_rank(rel) < d:
                raise ValueError("polytope vertices must be affinely independent")
            self.dim = d
            self._normals, self._offsets = _convex_face_planes(self.vertices_arr)
        else:
            raise ValueError(f"unknown obstacle kind {kind!r}")
        if motion is not None and motion.dim != self.dim:
            raise ValueError("motion spline dimension must match the obstacle")

    @classmethod
    def sphere(cls, center, radius, motion=None):
        return cls("sphere", center=center, radius=radius, motion=motion)

    @classmethod
    def box(cls, box_min, box_max, motion=None):
        return cls("box", box_min=box_min, box_max=box_max, motion=motion)

    @classmethod
    def polytope(cls, vertices, motion=None):
        return cls("polytope", vertices=vertices, motion=motion)

    @property
    def is_static(self) -> bool:
        return self.motion is None

    def nominal_center(self) -> np.ndarray:
        if self.kind == "sphere":
            return self.center
        if self.kind == "box":
            return 0.5 * (self.box_min + self.box_max)
        return self.vertices_arr.mean(axis=0)

    def center_at(self, taus) -> np.ndarray:
        if self.motion is None:
            t = np.atleast_1d(np.asarray(taus, dtype=float))
            return np.tile(self.nominal_center(), (t.size, 1))
        return self.motion.eval(np.atleast_1d(np.asarray(taus, dtype=float)))

    def corner_offsets(self) -> np.ndarray:
        """Vertex positions relative to the nominal center (box/polytope)."""
        if self.kind == "box":
            lo = self.box_min - self.nominal_center()
            hi = self.box_max - self.nominal_center()
            axes = [np.array([l, h]) for l, h in zip(lo, hi)]
            grid = np.meshgrid(*axes, indexing="ij")
            return np.stack([g.ravel() for g in grid], axis=1)
        if self.kind == "polytope":
            return self.vertices_arr - self.nominal_center()
        raise ValueError("sphere obstacles have no corner representation")

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        """Signed distance of the static shape at its nominal position.

        Spheres and boxes are analytic and exact.  Polytopes use the
        support-function form max_i(n_i . p - h_i) over face normals:
        exact inside and on the boundary, a lower bound outside near
        edges and corners, hence conservative for clearance constraints.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "sphere":
            return np.linalg.norm(pts - self.center, axis=1) - self.radius
        if self.kind == "box":
            c = self.nominal_center()
            half = 0.5 * (self.box_max - self.box_min)
            q = np.abs(pts - c) - half
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(q.max(axis=1), 0.0)
            return outside + inside
        return (pts @ self._normals.T - self._offsets).max(axis=1)


class SignedDistanceField:
    """Regular grid of signed distances with multilinear interpolation."""

    def __init__(self, origin, cell_size: float, values: np.ndarray):
        self.origin = np.asarray(origin, dtype=float)
        self.cell_size = float(cell_size)
        if self.cell_size <= 0.0:
            raise ValueError("cell_size must be positive")
        self.values = np.asarray(values, dtype=float)
        if self.values.ndim != self.origin.size:
            raise ValueError("values rank must match origin dimension")
        self.dims = self.values.shape
        self.upper = self.origin + self.cell_size * (np.array(self.dims) - 1)
        self._corner_shifts = np.stack(
            np.meshgrid(*([np.array([0, 1])] * len(self.dims)), indexing="ij"),
            axis=-1,
        ).reshape(-1, len(self.dims))

    @property
    def dim(self) -> int:
        return len(self.dims)

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        return np.all((pts >= self.origin) & (pts <= self.upper), axis=1)

    def _interpolate(self, pts: np.ndarray, with_grad: bool = False):
        t = (pts - self.origin) / self.cell_size
        idx = np.clip(np.floor(t).astype(int), 0, np.array(self.dims) - 2)
        f = t - idx
        g = 1.0 - f
        V = self.values
        if self.dim == 2:
            i, j = idx[:, 0], idx[:, 1]
            v00, v01 = V[i, j], V[i, j + 1]
            v10, v11 = V[i + 1, j], V[i + 1, j + 1]
            fx, fy, gx, gy = f[:, 0], f[:, 1], g[:, 0], g[:, 1]
            out = gx * (gy * v00 + fy * v01) + fx * (gy * v10 + fy * v11)
            if not with_grad:
                return out
            grads = np.empty_like(pts)
            grads[:, 0] = gy * (v10 - v00) + fy * (v11 - v01)
            grads[:, 1] = gx * (v01 - v00) + fx * (v11 - v10)
            return out, grads / self.cell_size
        if self.dim == 3:
            i, j, k = idx[:, 0], idx[:, 1], idx[:, 2]
            v000, v001 = V[i, j, k], V[i, j, k + 1]
            v010, v011 = V[i, j + 1, k], V[i, j + 1, k + 1]
            v100, v101 = V[i + 1, j, k], V[i + 1, j, k + 1]
            v110, v111 = V[i + 1, j + 1, k], V[i + 1, j + 1, k + 1]
            fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
            gx, gy, gz = g[:, 0], g[:, 1], g[:, 2]
            c00 = gz * v000 + fz * v001
            c01 = gz * v010 + fz * v011
            c10 = gz * v100 + fz * v101
            c11 = gz * v110 + fz * v111
            c0 = gy * c00 + fy * c01
            c1 = gy * c10 + fy * c11
            out = gx * c0 + fx * c1
            if not with_grad:
                return out
            grads = np.empty_like(pts)
            grads[:, 0] = c1 - c0
            d0 = c01 - c00
            d1 = c11 - c10
            grads[:, 1] = gx * d0 + fx * d1
            e00 = v001 - v000
            e01 = v011 - v010
            e10 = v101 - v100
            e11 = v111 - v110
            grads[:, 2] = gx * (gy * e00 + fy * e01) + fx * (gy * e10 + fy * e11)
            return out, grads / self.cell_size
        # Generic dimension fallback.
        out = np.zeros(pts.shape[0])
        grads = np.zeros_like(pts) if with_grad else None
        for shift in self._corner_shifts:
            corner = tuple((idx + shift).T)
            v = V[corner]
            factors = np.where(shift[None, :] == 1, f, g)
            out += np.prod(factors, axis=1) * v
            if with_grad:
                sign = np.where(shift == 1, 1.0, -1.0)
                for axis in range(self.dim):
                    others = np.prod(np.delete(factors, axis, axis=1), axis=1)
                    grads[:, axis] += sign[axis] * others * v
        if with_grad:
            return out, grads / self.cell_size
        return out

    def query(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Interpolated values and gradients; raises if any point is outside.

        The gradient is the exact derivative of the multilinear interpolant
        inside each cell (continuous value, per-cell-face piecewise gradient),
        so values and gradients are mutually consistent for the optimizer.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if not np.all(self.contains(pts)):
            bad = pts[~self.contains(pts)][0]
            raise OutOfBoundsError(f"query point {bad.tolist()} outside field bounds")
        return self._interpolate(pts, with_grad=True)

    def query_extended(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Lipschitz lower-bound extension for out-of-bounds points.

        Outside the field, value = V(clip(p)) - |p - clip(p)|, which is a
        valid lower bound on the true signed distance (the field is
        1-Lipschitz) and drives an optimizer back toward the interior.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        clipped = np.clip(pts, self.origin, self.upper)
        vals, grads = self.query(clipped)
        excess = pts - clipped
        dist = np.linalg.norm(excess, axis=1)
        outside = dist > 0.0
        if np.any(outside):
            vals = vals - dist
            unit = np.zeros_like(excess)
            unit[outside] = excess[outside] / dist[outside, None]
            grads = np.where(excess != 0.0, -unit, grads)
        return vals, grads


def build_sdf(primitives, bounds, cell_size: float,
              empty_value: float = EMPTY_FIELD_VALUE) -> SignedDistanceField:
    """Sample min-over-primitives signed distance on a regular grid.

    Args:
        primitives: Static obstacle primitives (moving ones are rejected).
        bounds: (lower, upper) workspace corners.
        cell_size: Grid node spacing in meters.
        empty_value: Sentinel stored when there are no primitives.
    """
    lo = np.asarray(bounds[0], dtype=float)
    hi = np.asarray(bounds[1], dtype=float)
    if cell_size <= 0.0:
        raise ValueError("cell_size must be positive")
    if np.any(hi <= lo):
        raise ValueError("workspace upper corner must exceed lower corner")
    for p in primitives:
        if not p.is_static:
            raise ValueError("signed distance fields accept static primitives only")
    dims = np.maximum(np.ceil((hi - lo) / cell_size).astype(int) + 1, 2)
    axes = [lo[i] + cell_size * np.arange(dims[i]) for i in range(lo.size)]
    grid = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grid], axis=1)
    if primitives:
        values = np.min(
            np.stack([p.signed_distance(pts) for p in primitives], axis=0), axis=0
        )
    else:
        values = np.full(pts.shape[0], empty_value)
    return SignedDistanceField(lo, cell_size, values.reshape(dims))


def sdf_query(field: SignedDistanceField, point) -> tuple[float, np.ndarray]:
    """Interpolated signed distance and gradient at one point."""
    vals, grads = field.query(np.atleast_2d(np.asarray(point, dtype=float)))
    return float(vals[0]), grads[0]


def save_sdf(field: SignedDistanceField, path) -> None:
    """Binary form: magic 'SDF1', then float64 little-endian header and values.

    Header floats: ndim, dims..., origin..., cell_size; values row-major.
    """
    with open(path, "wb") as fh:
        fh.write(SDF_MAGIC)
        header = [float(field.dim), *map(float, field.dims), *field.origin,
                  field.cell_size]
        fh.write(struct.pack(f"<{len(header)}d", *header))
        fh.write(field.values.astype("<f8").tobytes(order="C"))


def load_sdf(path) -> SignedDistanceField:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SDF_MAGIC:
            raise ValueError(f"not a signed distance field file (magic {magic!r})")
        (ndim,) = struct.unpack("<d", fh.read(8))
        ndim = int(ndim)
        dims = struct.unpack(f"<{ndim}d", fh.read(8 * ndim))
        origin = struct.unpack(f"<{ndim}d", fh.read(8 * ndim))
        (cell_size,) = struct.unpack("<d", fh.read(8))
        dims = tuple(int(d) for d in dims)
        count = int(np.prod(dims))
        values = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(dims)
    return SignedDistanceField(np.array(origin), cell_size, values.copy())


@dataclass(frozen=True)
class StaticClearanceConstraints:
    """Clearance residuals SD(x(tau_k)) - margin at a collocation grid.

    The margin absorbs inter-sample motion: clearance >= margin at samples
    spaced dt apart plus a speed bound v implies positive clearance for all
    time (the field is Lipschitz).  Residuals are positive when satisfied;
    points outside the field get Lipschitz-extended (violation-valued)
    residuals.
    """

    taus: np.ndarray
    margin: float
    positions: np.ndarray
    residuals: np.ndarray

    @property
    def satisfied(self) -> bool:
        return bool(np.all(self.residuals >= 0.0))

    def worst(self) -> tuple[float, float]:
        k = int(np.argmin(self.residuals))
        return float(self.taus[k]), float(self.residuals[k])


def static_clearance_constraints(
    vertex_traj,
    field: SignedDistanceField,
    margin: float,
    collocation,
) -> StaticClearanceConstraints:
    """One clearance inequality per collocation parameter for a tracked point.

    Args:
        vertex_traj: Either a (numerator, denominator) rational spline point
            or a plain vector BSpline.
        field: Precomputed signed distance field.
        margin: Required clearance at the samples (meters).
        collocation: Parameter grid.
    """
    taus = np.atleast_1d(np.asarray(collocation, dtype=float))
    if isinstance(vertex_traj, tuple):
        num, den = vertex_traj
        dvals = den.eval(taus)[:, 0]
        if np.any(dvals <= 0.0):
            raise ValueError("vertex trajectory denominator must stay positive")
        pos = num.eval(taus) / dvals[:, None]
    else:
        pos = vertex_traj.eval(taus)
    pos = pos[:, : field.dim]
    vals, _ = field.query_extended(pos)
    return StaticClearanceConstraints(taus, float(margin), pos, vals - margin)


@dataclass(frozen=True)
class Hyperplane:
    """Time-varying separating plane a(tau) . x + b(tau) = 0."""

    a: BSpline
    b: BSpline

    def __post_init__(self):
        if self.b.dim != 1:
            raise ValueError("plane offset must be scalar-valued")
        if not self.a.same_basis(self.b):
            raise ValueError("plane normal and offset must share a basis")


@dataclass(frozen=True)
class HyperplaneConstraintSet:
    """Composed constraint splines of the three separation families.

    robot_side:    one spline per tracked robot vertex, den_j*b + a . num_j,
                   feasible when every control point is >= 0;
    obstacle_side: one spline per obstacle support point (a . q_o + b + d_o
                   for spheres, a . v_k + b per corner otherwise), feasible
                   when every control point is <= 0;
    norm:          |a|^2 - 1, feasible when every control point is <= 0.
    """

    robot_side: tuple[BSpline, ...]
    obstacle_side: tuple[BSpline, ...]
    norm: BSpline

    def coefficient_margins(self) -> tuple[float, float, float]:
        """(min robot-side coeff, max obstacle-side coeff, max norm coeff)."""
        rmin = min(float(s.control_points.min()) for s in self.robot_side)
        omax = max(float(s.control_points.max()) for s in self.obstacle_side)
        nmax = float(self.norm.control_points.max())
        return rmin, omax, nmax

    def coefficients_satisfied(self, slack: float = 0.0) -> bool:
        rmin, omax, nmax = self.coefficient_margins()
        return rmin >= -slack and omax <= slack and nmax <= slack

    def sample_violations(self, taus) -> dict[str, float]:
        """Worst signed violation of each family sampled from the splines."""
        t = np.atleast_1d(np.asarray(taus, dtype=float))
        robot = max(
            float(np.maximum(-s.eval(t)[:, 0], 0.0).max()) for s in self.robot_side
        )
        obstacle = max(
            float(np.maximum(s.eval(t)[:, 0], 0.0).max()) for s in self.obstacle_side
        )
        norm = float(np.maximum(self.norm.eval(t)[:, 0], 0.0).max())
        return {"robot_side": robot, "obstacle_side": obstacle, "norm": norm}


def _dot_plane(a: BSpline, point_num: BSpline, cfg: RefitConfig) -> BSpline:
    """a . p as a spline, summing per-coordinate products."""
    total = None
    for c in range(point_num.dim):
        term = multiply(a.component(c), point_num.component(c), cfg)
        total = term if total is None else add(total, term, cfg)
    return total


def hyperplane_constraints(
    link_vertices,
    obstacle: ObstaclePrimitive,
    plane: Hyperplane,
    cfg: RefitConfig = DEFAULT_CONFIG,
) -> HyperplaneConstraintSet:
    """Reduce the three separation inequality families to composed splines.

    Args:
        link_vertices: Tracked robot vertex trajectories as (num, den)
            rational points (den positive) or plain vector BSplines.
        obstacle: Convex obstacle, static or moving.
        plane: Candidate separating plane splines.
        cfg: Refit configuration for the algebra.
    """
    d = plane.a.dim
    robot_side = []
    for traj in link_vertices:
        if isinstance(traj, tuple):
            num, den = traj
        else:
            num, den = traj, BSpline.constant([1.0])
        dotted = _dot_plane(plane.a, num, cfg)
        robot_side.append(add(multiply(den, plane.b, cfg), dotted, cfg))

    if obstacle.motion is not None:
        center = obstacle.motion
    else:
        center = BSpline.constant(obstacle.nominal_center())
    obstacle_side = []
    if obstacle.kind == "sphere":
        base = add(_dot_plane(plane.a, center, cfg), plane.b, cfg)
        shifted = BSpline(
            base.degree, base.knots, base.control_points + obstacle.radius
        )
        obstacle_side.append(shifted)
    else:
        for offset in obstacle.corner_offsets():
            corner = BSpline(
                center.degree, center.knots, center.control_points + offset
            )
            obstacle_side.append(
                add(_dot_plane(plane.a, corner, cfg), plane.b, cfg)
            )

    norm_sq = None
    for c in range(d):
        term = multiply(plane.a.component(c), plane.a.component(c), cfg)
        norm_sq = term if norm_sq is None else add(norm_sq, term, cfg)
    norm = BSpline(norm_sq.degree, norm_sq.knots, norm_sq.control_points - 1.0)

    return HyperplaneConstraintSet(tuple(robot_side), tuple(obstacle_side), norm)


def point_box_distance(points: np.ndarray, box_min, box_max) -> np.ndarray:
    """Exact Euclidean distance from points to an axis-aligned box (0 inside)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    lo = np.asarray(box_min, dtype=float)
    hi = np.asarray(box_max, dtype=float)
    q = np.maximum(np.maximum(lo - pts, pts - hi), 0.0)
    return np.linalg.norm(q, axis=1)


def box_sphere_distance(transform: np.ndarray, box_min, box_max,
                        center, radius: float) -> float:
    """Exact distance between a rigidly placed box and a sphere.

    The box is axis-aligned in its local frame and placed by the
    homogeneous transform; the sphere center is expressed in that local
    frame by the inverse rigid transform, where the point-box distance is
    closed form.
    """
    R = transform[:3, :3]
    t = transform[:3, 3]
    local = R.T @ (np.asarray(center, dtype=float) - t)
    return float(point_box_distance(local[None, :], box_min, box_max)[0] - radius)
