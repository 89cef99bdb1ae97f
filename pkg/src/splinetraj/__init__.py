"""Minimum-time trajectory planning with constraint-satisfying B-splines.

Trajectories are clamped B-splines over normalized time; every continuous
constraint (joint limits, static clearance, separation from moving convex
obstacles) is relaxed to finitely many conditions on spline control points
through the convex hull property, and the resulting nonlinear program is
solved by an embedded augmented Lagrangian method.
"""

from .bspline import (
    BSpline,
    DegreeError,
    DomainError,
    HullBounds,
    KnotVector,
    basis_matrix,
    clamp_knots,
    eval_basis,
    hull_bounds,
)
from .collision import (
    Hyperplane,
    ObstaclePrimitive,
    SignedDistanceField,
    build_sdf,
    hyperplane_constraints,
    load_sdf,
    save_sdf,
    sdf_query,
    static_clearance_constraints,
)
from .kinematics import (
    DHChain,
    DHLink,
    HalfAngleJoint,
    RationalSplineMatrix,
    compose,
    dh_transform,
    forward_kinematics,
    half_angle_trig,
    polynomial_dynamics_constraint,
    recover_theta,
    transform_point,
)
from .nlp import SolverConfig
from .planner import (
    DecisionVector,
    PlanningProblem,
    Solution,
    VerificationReport,
    assemble,
    initial_guess,
    solve,
    verify,
)
from .scenario import (
    ChainRobot,
    MobileRobot,
    Scenario,
    ScenarioError,
    load_scenario,
    parse_scenario,
    save_scenario,
)
from .spline_algebra import (
    RefitConfig,
    RefitError,
    add,
    knot_union,
    multiply,
    refit,
)

__version__ = "0.1.0"

__all__ = [
    "BSpline",
    "ChainRobot",
    "DHChain",
    "DHLink",
    "DecisionVector",
    "DegreeError",
    "DomainError",
    "HalfAngleJoint",
    "HullBounds",
    "Hyperplane",
    "KnotVector",
    "MobileRobot",
    "ObstaclePrimitive",
    "PlanningProblem",
    "RationalSplineMatrix",
    "RefitConfig",
    "RefitError",
    "Scenario",
    "ScenarioError",
    "SignedDistanceField",
    "Solution",
    "SolverConfig",
    "VerificationReport",
    "add",
    "assemble",
    "basis_matrix",
    "build_sdf",
    "clamp_knots",
    "compose",
    "dh_transform",
    "eval_basis",
    "forward_kinematics",
    "half_angle_trig",
    "hull_bounds",
    "hyperplane_constraints",
    "initial_guess",
    "knot_union",
    "load_scenario",
    "load_sdf",
    "multiply",
    "parse_scenario",
    "polynomial_dynamics_constraint",
    "recover_theta",
    "refit",
    "save_scenario",
    "save_sdf",
    "sdf_query",
    "solve",
    "static_clearance_constraints",
    "transform_point",
    "verify",
]
