"""Linearly solvable stochastic optimal control problems and their
sum-of-squares relaxations.

The controlled diffusion is

    dx = (f(x) + G(x) u) dt + B(x) dW,      W Brownian with covariance S_eps,

with running cost q(x) + u'Ru/2 and a boundary cost phi on the first-exit
boundary (exterior components and/or a goal point such as the origin).  When
a positive constant ``lam`` satisfies  lam * G R^{-1} G' = B S_eps B'  the
exponentiated value function Psi = exp(-V/lam) (the *desirability*) solves a
linear second-order PDE, and one-sided relaxations of that PDE give pointwise
lower/upper bounds Psi_l <= Psi <= Psi_u certified by sum-of-squares
multipliers over the problem domain.

``assemble`` builds the joint optimization for one subdomain and one degree:
minimize the certified gap eps subject to the lower/upper relaxation rows,
the gap row, boundary rows, per-coordinate monotonicity of Psi_l, and the
normalization Psi_l(0) = 1.  ``hierarchy`` sweeps even degrees, records
infeasible levels, and keeps the best (smallest-eps) certificate per
subdomain.  The certified lower bound yields the feedback law

    u(x) = (lam / Psi_l(x)) R^{-1} G(x)' grad Psi_l(x),

which is the gradient-descent controller of the upper value bound
V_u = -lam log Psi_l.

``lam`` is always computed from the problem data by polynomial matching of
the channel condition above, never user-supplied.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import sdp, sosprog
from .domains import (
    QUADRATIC_MODULE,
    PREORDERING,
    BoundarySet,
    SemialgebraicSet,
    generator_product,
    halfspace_intersect,
    preordering_indices,
    product_domain,
)
from .polynomials import PolyMatrix, Polynomial, hessian_trace_form

log = logging.getLogger(__name__)

STABILIZATION = "stabilization"
PATH_PLANNING = "path_planning"
DETERMINISTIC_CLF = "deterministic_clf"
MODES = (STABILIZATION, PATH_PLANNING, DETERMINISTIC_CLF)

EPS_MONOTONE_TOL = 1e-7


class HjbInputError(ValueError):
    pass


class ControllerDomainError(RuntimeError):
    """Raised when the controller is evaluated where Psi_l is not positive."""


@dataclass(frozen=True)
class BoundaryComponent:
    """One polynomial boundary piece {h = 0} with its cost.

    Either ``phi`` (cost polynomial) or ``psi_const`` (pinned constant
    desirability value) is given; desirability is psi = exp(-phi/lam).
    """

    h: Polynomial
    phi: Polynomial | None = None
    psi_const: float | None = None

    def __post_init__(self):
        if (self.phi is None) == (self.psi_const is None):
            raise HjbInputError("boundary component needs exactly one of phi/psi")


@dataclass(frozen=True)
class Partition:
    """A subdomain solved independently, with its own boundary pieces."""

    name: str
    domain: SemialgebraicSet
    components: tuple[BoundaryComponent, ...]
    points: tuple[tuple[tuple[float, ...], float], ...]  # (point, phi value)


@dataclass(frozen=True)
class UncertaintyModel:
    """Polynomial coefficient uncertainty a in f/G/B over a compact set."""

    param_names: tuple[str, ...]
    set_H: SemialgebraicSet
    f: PolyMatrix  # n x 1 over (x, a)
    G: PolyMatrix | None = None  # default: nominal lifted
    B: PolyMatrix | None = None

    def __post_init__(self):
        if not self.param_names:
            raise HjbInputError("uncertainty model needs at least one parameter")
        if self.set_H.nvars != len(self.param_names):
            raise HjbInputError("uncertainty set dimension mismatch")
        lo, hi = self.set_H.bounding_box(guess=np.inf)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise HjbInputError("uncertainty set must be compact (bounded box)")


class HjbProblem:
    """Validated problem data plus the computed transform constant lam."""

    def __init__(
        self,
        name: str,
        mode: str,
        f: PolyMatrix,
        G: PolyMatrix,
        B: PolyMatrix,
        sigma_eps: np.ndarray,
        q: Polynomial,
        R: np.ndarray,
        domain: SemialgebraicSet,
        partitions: list[Partition],
        uncertainty: UncertaintyModel | None = None,
        sim_defaults: dict | None = None,
    ):
        if mode not in MODES:
            raise HjbInputError(f"unknown mode {mode!r}")
        self.name = name
        self.mode = mode
        self.f = f
        self.G = G
        self.B = B
        self.sigma_eps = np.atleast_2d(np.asarray(sigma_eps, dtype=float))
        self.q = q
        self.R = np.atleast_2d(np.asarray(R, dtype=float))
        self.domain = domain
        self.partitions = tuple(partitions)
        self.uncertainty = uncertainty
        self.sim_defaults = dict(sim_defaults or {})
        self.warnings: list[str] = []

        n = domain.nvars
        if f.rows != n or f.cols != 1:
            raise HjbInputError("drift must be an n x 1 polynomial matrix")
        if G.rows != n or B.rows != n:
            raise HjbInputError("input/noise maps must have n rows")
        if self.R.shape != (G.cols, G.cols):
            raise HjbInputError("control penalty shape mismatch")
        if self.sigma_eps.shape != (B.cols, B.cols):
            raise HjbInputError("noise covariance shape mismatch")
        _require_symmetric_pd(self.R, "control penalty R")
        _require_symmetric_psd(self.sigma_eps, "noise covariance")

        self.sigma_t = _sigma_t(B, self.sigma_eps)
        self.lam = compute_lambda(G, self.R, B, self.sigma_eps)

        origin = np.zeros(n)
        if mode in (STABILIZATION, DETERMINISTIC_CLF):
            fval = f.eval(origin)
            if np.max(np.abs(fval)) > 1e-9:
                raise HjbInputError("stabilization mode requires f(0) = 0")
            for mat, label in ((G, "G"), (B, "B")):
                if np.max(np.abs(mat.eval(origin))) > 1e-9:
                    self.warnings.append(
                        f"{label}(0) != 0: origin is not an uncontrolled equilibrium "
                        "of the noise/input channels; first-exit termination at the "
                        "goal still applies"
                    )
            if abs(q.eval(origin)) > 1e-12:
                raise HjbInputError("state cost must vanish at the origin")
            has_origin_point = any(
                np.allclose(pt, 0.0) and abs(phi) < 1e-12
                for part in self.partitions
                for pt, phi in part.points
            )
            if not has_origin_point:
                raise HjbInputError(
                    "stabilization mode needs a zero-cost goal point at the origin"
                )
        # positive definiteness of q away from the goal, sampled
        rng = np.random.default_rng(12345)
        pts = domain.sample(200, rng)
        qs = q.eval_many(pts)
        far = np.linalg.norm(pts, axis=1) > 1e-6
        if np.any(qs[far] <= 0):
            raise HjbInputError("state cost q must be positive on the domain minus the goal")

    @property
    def nvars(self) -> int:
        return self.domain.nvars

    def boundary(self) -> BoundarySet:
        comps = []
        points = []
        seen = set()
        for part in self.partitions:
            for comp in part.components:
                key = comp.h.format()
                if key not in seen:
                    seen.add(key)
                    comps.append(comp.h)
            for pt, phi in part.points:
                if tuple(pt) not in {tuple(p) for p, _ in points}:
                    points.append((tuple(pt), phi))
        return BoundarySet(components=tuple(comps), point_constraints=tuple(points))

    def partition_containing(self, x, tol: float = 1e-9) -> Partition:
        for part in self.partitions:
            if part.domain.contains(x, tol=tol):
                return part
        raise ControllerDomainError(f"state {x} lies in no partition")


def _require_symmetric_pd(M: np.ndarray, label: str) -> None:
    if not np.allclose(M, M.T, atol=1e-12):
        raise HjbInputError(f"{label} must be symmetric")
    if np.min(np.linalg.eigvalsh(M)) <= 0:
        raise HjbInputError(f"{label} must be positive definite")


def _require_symmetric_psd(M: np.ndarray, label: str) -> None:
    if not np.allclose(M, M.T, atol=1e-12):
        raise HjbInputError(f"{label} must be symmetric")
    if np.min(np.linalg.eigvalsh(M)) < -1e-12:
        raise HjbInputError(f"{label} must be positive semidefinite")


def _sigma_t(B: PolyMatrix, sigma_eps: np.ndarray) -> PolyMatrix:
    n = B.rows
    mid = PolyMatrix.from_numeric(sigma_eps, B.nvars)
    return B.matmul(mid).matmul(B.transpose())


def compute_lambda(
    G: PolyMatrix, R: np.ndarray, B: PolyMatrix, sigma_eps: np.ndarray,
    tol: float = 1e-9,
) -> float:
    """Solve lam * G R^{-1} G' = B S_eps B' by matching polynomial matrices."""
    Rinv = np.linalg.inv(np.atleast_2d(R))
    lhs = G.matmul(PolyMatrix.from_numeric(Rinv, G.nvars)).matmul(G.transpose())
    rhs = _sigma_t(B, sigma_eps)
    pairs: list[tuple[float, float]] = []
    for i in range(lhs.rows):
        for j in range(lhs.cols):
            a = lhs.entry(i, j)
            b = rhs.entry(i, j)
            monos = set(a.terms) | set(b.terms)
            for m in monos:
                pairs.append((a.terms.get(m, 0.0), b.terms.get(m, 0.0)))
    anchors = [(a, b) for a, b in pairs if abs(a) > tol]
    if not anchors:
        raise HjbInputError(
            "control channel G R^{-1} G' vanishes; no positive lam exists"
        )
    lam = anchors[0][1] / anchors[0][0]
    if lam <= 0:
        raise HjbInputError(f"matched lam = {lam:.3e} is not positive")
    worst = max(abs(lam * a - b) for a, b in pairs)
    if worst > tol * max(1.0, abs(lam)):
        raise HjbInputError(
            f"no single lam matches the noise/control channels "
            f"(worst coefficient mismatch {worst:.2e})"
        )
    return float(lam)


def l_operator(psi: Polynomial, prob: HjbProblem) -> Polynomial:
    """f' grad(psi) + Tr(Hess(psi) Sigma_t)/2 with Sigma_t = B S_eps B'."""
    return _l_operator_raw(psi, prob.f, prob.sigma_t)


def _l_operator_raw(psi: Polynomial, f: PolyMatrix, sigma_t: PolyMatrix) -> Polynomial:
    if psi.nvars != f.nvars:
        raise ValueError("dimension mismatch in generator application")
    out = Polynomial.zero(psi.nvars)
    for i in range(f.rows):
        out = out + f.entry(i, 0) * psi.diff(i)
    return out + hessian_trace_form(psi, sigma_t).scale(0.5)


# ---------------------------------------------------------------------------
# Boundary desirability
# ---------------------------------------------------------------------------


def boundary_desirability(
    prob: HjbProblem, partition: Partition, fit_degree: int = 8,
    n_samples: int = 200,
) -> tuple[list[Polynomial], list[tuple[tuple[float, ...], float]], list[float]]:
    """psi = exp(-phi/lam) per boundary component plus pinned point values.

    Constant phi maps exactly; non-constant phi on an affine component is fit
    by least squares on sampled component points, and the fit residual is
    returned alongside.
    """
    if prob.lam <= 0:
        raise HjbInputError("lam must be positive")
    psis: list[Polynomial] = []
    residuals: list[float] = []
    n = prob.nvars
    for comp in partition.components:
        if comp.psi_const is not None:
            psis.append(Polynomial.constant(n, comp.psi_const))
            residuals.append(0.0)
            continue
        phi = comp.phi
        if phi.degree() == 0:
            psis.append(
                Polynomial.constant(n, math.exp(-phi.constant_term() / prob.lam))
            )
            residuals.append(0.0)
            continue
        pts = _sample_component(comp.h, partition.domain, n_samples)
        vals = np.exp(-phi.eval_many(pts) / prob.lam)
        fit, res = _poly_least_squares(pts, vals, fit_degree)
        psis.append(fit)
        residuals.append(res)
    points = [
        (tuple(pt), math.exp(-phi_val / prob.lam)) for pt, phi_val in partition.points
    ]
    return psis, points, residuals


def _sample_component(h: Polynomial, domain: SemialgebraicSet, n: int) -> np.ndarray:
    if h.degree() != 1:
        raise HjbInputError(
            "sampling non-affine boundary components is not supported; "
            "give the component cost as a constant or pinned value"
        )
    nv = h.nvars
    coeffs = np.zeros(nv)
    for m, c in h.terms.items():
        if sum(m) == 1:
            coeffs[m.index(1)] = c
    const = h.constant_term()
    pivot = int(np.argmax(np.abs(coeffs)))
    lo, hi = domain.bounding_box()
    rng = np.random.default_rng(4242)
    out = []
    while len(out) < n:
        x = rng.uniform(lo, hi)
        x[pivot] = 0.0
        rest = const + float(coeffs @ x)
        x[pivot] = -rest / coeffs[pivot]
        if domain.contains(x, tol=1e-9):
            out.append(x.copy())
    return np.array(out)


def _poly_least_squares(pts: np.ndarray, vals: np.ndarray, degree: int):
    from .polynomials import monomials_upto

    monos = monomials_upto(pts.shape[1], degree)
    M = np.ones((pts.shape[0], len(monos)))
    for k, m in enumerate(monos):
        for i, e in enumerate(m):
            if e:
                M[:, k] *= pts[:, i] ** e
    coef, *_ = np.linalg.lstsq(M, vals, rcond=None)
    res = float(np.max(np.abs(M @ coef - vals)))
    return Polynomial(pts.shape[1], dict(zip(monos, coef))), res


# ---------------------------------------------------------------------------
# Program assembly
# ---------------------------------------------------------------------------


def _even_up(d: int) -> int:
    return d + (d % 2)


def _localizers(domain: SemialgebraicSet, kind: str) -> list[Polynomial]:
    if kind == QUADRATIC_MODULE:
        return list(domain.inequalities)
    if kind == PREORDERING:
        k = len(domain.inequalities)
        return [
            generator_product(domain, nu)
            for nu in preordering_indices(k)
            if any(nu)
        ]
    raise ValueError(f"unknown certificate kind {kind!r}")


def assemble(
    prob: HjbProblem,
    partition: Partition,
    degree: int,
    cert_kind: str = QUADRATIC_MODULE,
) -> sosprog.SosProgram:
    """Build the gap-minimization program for one subdomain at one degree."""
    if degree % 2 != 0:
        raise HjbInputError("template degree must be even")
    data_deg = max(
        prob.q.degree(),
        max(p.degree() for p in prob.f.entries),
        prob.sigma_t.entries and max(p.degree() for p in prob.sigma_t.entries) or 0,
    )
    if degree < data_deg:
        raise HjbInputError(
            f"degree {degree} is below the problem data degree {data_deg}"
        )
    n = prob.nvars
    prog = sosprog.SosProgram(n)
    prog.new_poly("psi_l", degree)
    prog.new_poly("psi_u", degree)
    eps = prog.new_scalar("epsilon")

    omega = partition.domain
    locs = _localizers(omega, cert_kind)
    lam = prob.lam

    def relax_expr(name: str, sign: float) -> sosprog.AffinePolyExpr:
        # sign=+1: L(psi) - q psi / lam  (lower row);  sign=-1: the negation
        return prog.apply_to_template(
            name,
            lambda p: (_l_operator_raw(p, prob.f, prob.sigma_t)
                       - (prob.q * p).scale(1.0 / lam)).scale(sign),
        )

    lower = relax_expr("psi_l", +1.0)
    prog.add_sos(lower, _even_up(lower.degree()), locs, name="relax_lower")
    upper = relax_expr("psi_u", -1.0)
    prog.add_sos(upper, _even_up(upper.degree()), locs, name="relax_upper")

    gap = (
        prog.scalar_expr(eps)
        - prog.template_expr("psi_u")
        + prog.template_expr("psi_l")
    )
    prog.add_sos(gap, degree, locs, name="gap")

    psis, points, fit_res = boundary_desirability(prob, partition, fit_degree=degree)
    for i, (comp, psi_i) in enumerate(zip(partition.components, psis)):
        hdeg = comp.h.degree()
        if hdeg > degree:
            raise HjbInputError("boundary component degree exceeds template degree")
        budget = _even_up(max(degree, psi_i.degree()))
        for fam, expr0 in (
            ("bnd_lower_pos", prog.template_expr("psi_l")),
            ("bnd_lower_cap",
             sosprog.AffinePolyExpr.from_poly(psi_i) - prog.template_expr("psi_l")),
            ("bnd_upper",
             prog.template_expr("psi_u") - sosprog.AffinePolyExpr.from_poly(psi_i)),
        ):
            t = prog.new_poly(f"{fam}_t{i}", budget - hdeg)
            expr = expr0 - prog.apply_to_template(
                f"{fam}_t{i}", lambda p: p * comp.h
            )
            prog.add_sos(expr, budget, name=f"{fam}_{i}")

    stabilizing = prob.mode in (STABILIZATION, DETERMINISTIC_CLF)
    if stabilizing:
        # A halfspace cut that leaves no interior (a subdomain already on one
        # side of the axis) would pin grad psi_l = 0 at the interface point and
        # empty the program's interior; partitioned solves take only their own
        # side's row.
        lo, hi = omega.bounding_box()
        for i in range(n):
            dpsi = prog.apply_to_template("psi_l", lambda p, i=i: p.diff(i))
            if hi[i] > 1e-12:
                pos = halfspace_intersect(omega, i, +1)
                prog.add_sos(dpsi.scale(-1.0), degree, _localizers(pos, cert_kind),
                             name=f"monotone_pos_{i}")
            if lo[i] < -1e-12:
                neg = halfspace_intersect(omega, i, -1)
                prog.add_sos(dpsi, degree, _localizers(neg, cert_kind),
                             name=f"monotone_neg_{i}")
        prog.add_linear(
            prog.template_value_coeffs("psi_l", np.zeros(n)), 1.0, "eq",
            name="normalization",
        )

    for pt, psi_val in points:
        at_origin = np.allclose(pt, 0.0)
        ge_u = prog.template_value_coeffs("psi_u", pt)
        prog.add_linear(ge_u, psi_val, "ge", name=f"point_upper_{pt}")
        if not (stabilizing and at_origin and abs(psi_val - 1.0) < 1e-12):
            lo = prog.template_value_coeffs("psi_l", pt)
            prog.add_linear(lo, 0.0, "ge", name=f"point_lower_pos_{pt}")
            neg = {v: -c for v, c in lo.items()}
            prog.add_linear(neg, -psi_val, "ge", name=f"point_lower_cap_{pt}")

    prog.set_objective({eps: 1.0})
    return prog


def assemble_robust(
    prob: HjbProblem,
    unc: UncertaintyModel,
    partition: Partition,
    degree: int,
    cert_kind: str = QUADRATIC_MODULE,
) -> sosprog.SosProgram:
    """Robust variant: multipliers live over the product of the subdomain and
    the uncertainty set; the bound templates stay functions of the state only."""
    if degree % 2 != 0:
        raise HjbInputError("template degree must be even")
    n = prob.nvars
    k = len(unc.param_names)
    N = n + k
    f = unc.f
    if f.nvars != N:
        raise HjbInputError("uncertain drift must be over (x, a)")
    G = unc.G if unc.G is not None else prob.G.lift(N, 0)
    B = unc.B if unc.B is not None else prob.B.lift(N, 0)
    compute_lambda(G, prob.R, B, prob.sigma_eps)  # channel condition over (x, a)
    sigma_t = _sigma_t(B, prob.sigma_eps)
    q = prob.q.lift(N, 0)
    lam = prob.lam

    omega = SemialgebraicSet(
        N, tuple(g.lift(N, 0) for g in partition.domain.inequalities)
    )
    setH = SemialgebraicSet(
        N, tuple(g.lift(N, n) for g in unc.set_H.inequalities)
    )
    m_dom = SemialgebraicSet(N, omega.inequalities + setH.inequalities)

    prog = sosprog.SosProgram(N)
    from .polynomials import monomials_upto

    x_monos = [m for m in monomials_upto(N, degree) if all(e == 0 for e in m[n:])]
    prog.new_poly("psi_l", degree, monomials=x_monos)
    prog.new_poly("psi_u", degree, monomials=x_monos)
    eps = prog.new_scalar("epsilon")
    locs_m = _localizers(m_dom, cert_kind)
    locs_h = _localizers(setH, cert_kind)

    def relax_expr(name: str, sign: float) -> sosprog.AffinePolyExpr:
        return prog.apply_to_template(
            name,
            lambda p: (_l_operator_raw(p, f, sigma_t)
                       - (q * p).scale(1.0 / lam)).scale(sign),
        )

    lower = relax_expr("psi_l", +1.0)
    prog.add_sos(lower, _even_up(lower.degree()), locs_m, name="relax_lower")
    upper = relax_expr("psi_u", -1.0)
    prog.add_sos(upper, _even_up(upper.degree()), locs_m, name="relax_upper")
    gap = (
        prog.scalar_expr(eps)
        - prog.template_expr("psi_u")
        + prog.template_expr("psi_l")
    )
    prog.add_sos(gap, degree, locs_m, name="gap")

    psis, points, _ = boundary_desirability(prob, partition, fit_degree=degree)
    for i, (comp, psi_i) in enumerate(zip(partition.components, psis)):
        h = comp.h.lift(N, 0)
        psi_L = psi_i.lift(N, 0)
        budget = _even_up(max(degree, psi_L.degree()))
        for fam, expr0 in (
            ("bnd_lower_pos", prog.template_expr("psi_l")),
            ("bnd_lower_cap",
             sosprog.AffinePolyExpr.from_poly(psi_L) - prog.template_expr("psi_l")),
            ("bnd_upper",
             prog.template_expr("psi_u") - sosprog.AffinePolyExpr.from_poly(psi_L)),
        ):
            t = prog.new_poly(f"{fam}_t{i}", budget - h.degree())
            expr = expr0 - prog.apply_to_template(f"{fam}_t{i}", lambda p: p * h)
            prog.add_sos(expr, budget, locs_h, name=f"{fam}_{i}")

    stabilizing = prob.mode in (STABILIZATION, DETERMINISTIC_CLF)
    if stabilizing:
        lo, hi = partition.domain.bounding_box()
        for i in range(n):
            dpsi = prog.apply_to_template("psi_l", lambda p, i=i: p.diff(i))
            if hi[i] > 1e-12:
                pos = halfspace_intersect(m_dom, i, +1)
                prog.add_sos(dpsi.scale(-1.0), degree, _localizers(pos, cert_kind),
                             name=f"monotone_pos_{i}")
            if lo[i] < -1e-12:
                neg = halfspace_intersect(m_dom, i, -1)
                prog.add_sos(dpsi, degree, _localizers(neg, cert_kind),
                             name=f"monotone_neg_{i}")
        # two-sided normalization rows over the uncertainty set
        origin = np.zeros(N)
        norm = sosprog.AffinePolyExpr(
            N,
            constant=Polynomial.constant(N, -1.0),
            terms={v: Polynomial.constant(N, c)
                   for v, c in prog.template_value_coeffs("psi_l", origin).items()
                   if c != 0.0},
        )
        budget_h = _even_up(max((g.degree() for g in setH.inequalities), default=0))
        prog.add_sos(norm, budget_h, locs_h, name="norm_upper")
        prog.add_sos(norm.scale(-1.0), budget_h, locs_h, name="norm_lower")

    for pt, psi_val in points:
        pt_full = tuple(pt) + (0.0,) * k
        prog.add_linear(
            prog.template_value_coeffs("psi_u", pt_full), psi_val, "ge",
            name=f"point_upper_{pt}",
        )

    prog.set_objective({eps: 1.0})
    return prog


# ---------------------------------------------------------------------------
# Hierarchy driver and certified solutions
# ---------------------------------------------------------------------------


@dataclass
class PartitionSolution:
    partition: str
    degree: int
    status: str
    epsilon: float | None = None
    psi_l: Polynomial | None = None
    psi_u: Polynomial | None = None
    multipliers: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    cert_kind: str = QUADRATIC_MODULE


@dataclass
class CertifiedSolution:
    problem_name: str
    mode: str
    degrees: list[int]
    records: list[PartitionSolution]
    warnings: list[str] = field(default_factory=list)

    def for_partition(self, name: str) -> list[PartitionSolution]:
        return [r for r in self.records if r.partition == name]

    def feasible(self, name: str) -> list[PartitionSolution]:
        return [r for r in self.for_partition(name) if r.status == sdp.OPTIMAL]

    def best(self, name: str) -> PartitionSolution | None:
        feas = self.feasible(name)
        return min(feas, key=lambda r: r.epsilon) if feas else None

    @property
    def partition_names(self) -> list[str]:
        seen: list[str] = []
        for r in self.records:
            if r.partition not in seen:
                seen.append(r.partition)
        return seen

    @property
    def all_infeasible(self) -> bool:
        return any(self.best(name) is None for name in self.partition_names)

    @property
    def any_stalled(self) -> bool:
        return any(r.status == sdp.STALLED for r in self.records)


def solve_partition_degree(
    prob: HjbProblem,
    partition: Partition,
    degree: int,
    solver_opts: sdp.SolverOptions | None = None,
    cert_kind: str = QUADRATIC_MODULE,
    escalate: bool = True,
    uncertainty: UncertaintyModel | None = None,
) -> PartitionSolution:
    """Assemble, compile, and solve one (partition, degree) program.

    When the quadratic-module certificate is infeasible the preordering form
    is tried before the level is recorded as infeasible.
    """
    opts = solver_opts or sdp.SolverOptions()
    kinds = [cert_kind]
    if escalate and cert_kind == QUADRATIC_MODULE:
        kinds.append(PREORDERING)
    last: PartitionSolution | None = None
    for kind in kinds:
        if uncertainty is not None:
            prog = assemble_robust(prob, uncertainty, partition, degree, kind)
        else:
            prog = assemble(prob, partition, degree, kind)
        sd = sosprog.compile(prog)
        sol = sdp.solve(sd, opts)
        stats = {
            "iterations": sol.iterations,
            "kkt": sol.kkt_residuals,
            "blocks": len(sd.block_dims),
            "rows": sd.n_rows,
        }
        if sol.status == sdp.OPTIMAL:
            ext = sosprog.extract(prog, sol)
            psi_l = ext.polys["psi_l"]
            psi_u = ext.polys["psi_u"]
            if uncertainty is not None:
                psi_l = _drop_vars(psi_l, prob.nvars)
                psi_u = _drop_vars(psi_u, prob.nvars)
            return PartitionSolution(
                partition=partition.name,
                degree=degree,
                status=sdp.OPTIMAL,
                epsilon=ext.objective,
                psi_l=psi_l,
                psi_u=psi_u,
                multipliers=_multiplier_archive(ext),
                stats=stats,
                cert_kind=kind,
            )
        if sol.status == sdp.INFEASIBLE:
            stats["certified"] = sdp.certify_infeasible(sd, sol)
            last = PartitionSolution(
                partition=partition.name, degree=degree, status=sdp.INFEASIBLE,
                stats=stats, cert_kind=kind,
            )
            continue  # try the larger certificate cone
        last = PartitionSolution(
            partition=partition.name, degree=degree, status=sol.status,
            stats=stats, cert_kind=kind,
        )
    return last


def _drop_vars(p: Polynomial, n: int) -> Polynomial:
    """Restrict a polynomial known to use only the first n variables."""
    out = {}
    for m, c in p.terms.items():
        if any(m[n:]):
            raise ValueError("polynomial unexpectedly depends on lifted variables")
        out[m[:n]] = c
    return Polynomial(n, out)


def _multiplier_archive(ext: sosprog.Extraction) -> dict:
    arch = {}
    for name, slot in ext.multipliers.items():
        arch[name] = {
            "sos": slot["sos"].format() if slot["sos"] is not None else None,
            "multipliers": [
                {"generator": g.format(), "multiplier": s.format()}
                for g, s in slot["multipliers"]
            ],
        }
    for tname, poly in ext.polys.items():
        if tname.startswith("bnd_"):
            arch.setdefault("boundary_t", {})[tname] = poly.format()
    return arch


def hierarchy(
    prob: HjbProblem,
    d_min: int,
    d_max: int,
    solver_opts: sdp.SolverOptions | None = None,
    cert_kind: str = QUADRATIC_MODULE,
    uncertainty: UncertaintyModel | None = None,
) -> CertifiedSolution:
    """Sweep even degrees d_min..d_max per partition; keep everything.

    The certified gap must be nonincreasing in the degree; violations beyond
    solver accuracy are recorded as warnings, not hard errors.
    """
    if d_min % 2 or d_max % 2 or d_min > d_max:
        raise HjbInputError("degree range must be even and ordered")
    degrees = list(range(d_min, d_max + 1, 2))
    records: list[PartitionSolution] = []
    warnings: list[str] = []
    for part in prob.partitions:
        prev_eps: float | None = None
        for d in degrees:
            rec = solve_partition_degree(
                prob, part, d, solver_opts, cert_kind, uncertainty=uncertainty
            )
            records.append(rec)
            log.info(
                "partition %-8s degree %2d  %s%s",
                part.name, d, rec.status,
                f"  eps={rec.epsilon:.4e}" if rec.epsilon is not None else "",
            )
            if rec.status == sdp.OPTIMAL:
                if prev_eps is not None and rec.epsilon > prev_eps + EPS_MONOTONE_TOL:
                    warnings.append(
                        f"{part.name}: gap increased from {prev_eps:.4e} to "
                        f"{rec.epsilon:.4e} between degrees {d - 2} and {d} "
                        "(solver accuracy)"
                    )
                prev_eps = rec.epsilon
    sol = CertifiedSolution(
        problem_name=prob.name,
        mode=prob.mode,
        degrees=degrees,
        records=records,
        warnings=warnings,
    )
    _validate_certified(sol, prob)
    return sol


def _validate_certified(sol: CertifiedSolution, prob: HjbProblem) -> None:
    rng = np.random.default_rng(7)
    for part in prob.partitions:
        best = sol.best(part.name)
        if best is None:
            continue
        pts = part.domain.sample(200, rng)
        gapv = best.psi_u.eval_many(pts) - best.psi_l.eval_many(pts)
        if np.max(gapv) > best.epsilon + 1e-7:
            sol.warnings.append(
                f"{part.name}: sampled gap {np.max(gapv):.3e} exceeds certified "
                f"eps {best.epsilon:.3e}"
            )
        if prob.mode in (STABILIZATION, DETERMINISTIC_CLF):
            v0 = best.psi_l.eval(np.zeros(prob.nvars))
            if abs(v0 - 1.0) > 1e-6:
                sol.warnings.append(
                    f"{part.name}: normalization drifted, psi_l(0) = {v0:.8f}"
                )


# ---------------------------------------------------------------------------
# Value functions and the feedback controller
# ---------------------------------------------------------------------------


def value_function(sol: CertifiedSolution, prob: HjbProblem, which: str):
    """Querying callable for V_u = -lam log psi_l (which='upper') or
    V_l = -lam log psi_u (which='lower')."""
    if which not in ("upper", "lower"):
        raise ValueError("which must be 'upper' or 'lower'")

    def V(x) -> float:
        part = prob.partition_containing(x)
        best = sol.best(part.name)
        if best is None:
            raise ControllerDomainError(f"no feasible certificate on {part.name}")
        psi = best.psi_l if which == "upper" else best.psi_u
        val = psi.eval(x)
        if val <= 0:
            raise ControllerDomainError(
                f"desirability bound is nonpositive ({val:.3e}) at {x}"
            )
        return -prob.lam * math.log(val)

    return V


class Controller:
    """Feedback law u(x) = (lam/psi_l(x)) R^{-1} G(x)' grad psi_l(x).

    Partitioned problems select the certificate of the subdomain containing
    the queried state.  Evaluation errors out where psi_l is not positive;
    positivity inside the domain is not a program constraint, so the guard
    lives here.
    """

    def __init__(self, prob: HjbProblem, pieces: list[tuple[Partition, Polynomial]]):
        self.prob = prob
        self.Rinv = np.linalg.inv(prob.R)
        self.pieces = [
            (part, psi, psi.gradient()) for part, psi in pieces
        ]

    @staticmethod
    def from_solution(sol: CertifiedSolution, prob: HjbProblem) -> Controller:
        pieces = []
        for part in prob.partitions:
            best = sol.best(part.name)
            if best is None:
                raise ControllerDomainError(
                    f"partition {part.name} has no feasible certificate"
                )
            pieces.append((part, best.psi_l))
        return Controller(prob, pieces)

    def psi_at(self, x) -> float:
        for part, psi, _ in self.pieces:
            if part.domain.contains(x, tol=1e-9):
                return psi.eval(x)
        raise ControllerDomainError(f"state {x} lies in no partition")

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        for part, psi, grad in self.pieces:
            if part.domain.contains(x, tol=1e-9):
                val = psi.eval(x)
                if val <= 1e-12:
                    raise ControllerDomainError(
                        f"psi_l(x) = {val:.3e} <= 1e-12 at x = {x}; controller "
                        "undefined there"
                    )
                gvec = np.array([g.eval(x) for g in grad])
                Gx = self.prob.G.eval(x)
                return (self.prob.lam / val) * (self.Rinv @ (Gx.T @ gvec))
        raise ControllerDomainError(f"state {x} lies in no partition")


def control(sol: CertifiedSolution, prob: HjbProblem, x) -> np.ndarray:
    """One-shot controller evaluation at state x."""
    return Controller.from_solution(sol, prob)(x)


# ---------------------------------------------------------------------------
# Deterministic extension: trace condition on the upper value bound
# ---------------------------------------------------------------------------


def deterministic_trace_row(psi_l: Polynomial, prob: HjbProblem) -> Polynomial:
    """Polynomial whose nonnegativity on the domain makes V_u a deterministic
    control Lyapunov function:  Tr((grad psi grad psi' - psi Hess psi) S_t).

    This is the Hessian-trace condition on V_u multiplied through by
    psi_l^2/lam, valid wherever psi_l > 0.  It is quadratic in psi_l, so it
    cannot be a convex program row over a free template; it is certified for
    the solved psi_l after the fact (see certify_trace_condition)."""
    if prob.mode != DETERMINISTIC_CLF:
        raise HjbInputError("trace row applies in deterministic_clf mode only")
    n = psi_l.nvars
    grad = psi_l.gradient()
    hess = psi_l.hessian()
    total = Polynomial.zero(n)
    for i in range(n):
        for j in range(n):
            outer = grad[i] * grad[j]
            total = total + (outer - psi_l * hess[i][j]) * prob.sigma_t.entry(j, i)
    return total


def certify_trace_condition(
    psi_l: Polynomial,
    partition: Partition,
    prob: HjbProblem,
    solver_opts: sdp.SolverOptions | None = None,
    cert_kind: str = QUADRATIC_MODULE,
) -> tuple[bool, dict]:
    """SOS-certify the trace condition for a solved psi_l on one subdomain."""
    T = deterministic_trace_row(psi_l, prob)
    prog = sosprog.SosProgram(prob.nvars)
    budget = _even_up(T.degree())
    prog.add_sos(
        sosprog.AffinePolyExpr.from_poly(T), budget,
        _localizers(partition.domain, cert_kind), name="trace",
    )
    sol = sdp.solve(sosprog.compile(prog), solver_opts or sdp.SolverOptions())
    info = {"status": sol.status, "iterations": sol.iterations}
    if sol.status == sdp.OPTIMAL:
        info["residual"] = sosprog.certificate_residual(prog, sol, "trace")
        return True, info
    if sol.status == sdp.INFEASIBLE and cert_kind == QUADRATIC_MODULE:
        return certify_trace_condition(
            psi_l, partition, prob, solver_opts, PREORDERING
        )
    return False, info
