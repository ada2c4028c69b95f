"""Basic closed semialgebraic sets, boundary descriptions, and the two
operators used to build nonnegativity certificates on them.

A domain is the set {x : g_i(x) >= 0 for all i}.  Its boundary is described
by polynomial components h_i (the boundary is where the product of the h_i
vanishes) plus optional isolated points.  Isolated points (a goal point such
as the origin) carry a pinned boundary-cost value instead of a polynomial
component: a zero-dimensional component has no useful polynomial multiplier,
so those are enforced later as linear constraints on coefficients.

``d_operator`` builds the weighted generator combination that is nonnegative
on the domain whenever every multiplier is a sum of squares; it supports both
the quadratic-module form (one multiplier per generator) and the preordering
form (one multiplier per subset of generators).  ``b_operator`` builds the
family {p - t_i*h_i} whose nonnegativity certifies p >= 0 on the boundary.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .polynomials import Polynomial

QUADRATIC_MODULE = "quadratic_module"
PREORDERING = "preordering"


@dataclass(frozen=True)
class SemialgebraicSet:
    """Intersection of polynomial inequalities {x : g_i(x) >= 0}."""

    nvars: int
    inequalities: tuple[Polynomial, ...]

    def __post_init__(self):
        if not self.inequalities:
            raise ValueError("a semialgebraic set needs at least one inequality")
        for g in self.inequalities:
            if g.nvars != self.nvars:
                raise ValueError("generator nvars mismatch")

    @staticmethod
    def from_list(gens: list[Polynomial]) -> SemialgebraicSet:
        return SemialgebraicSet(gens[0].nvars, tuple(gens))

    def contains(self, point, tol: float = 0.0) -> bool:
        return all(g.eval(point) >= -tol for g in self.inequalities)

    def contains_many(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        ok = np.ones(points.shape[0], dtype=bool)
        for g in self.inequalities:
            ok &= g.eval_many(points) >= -tol
        return ok

    def bounding_box(self, guess: float = 10.0) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned box enclosing the set, detected from linear/quadratic
        generators of the forms c +- x_i and c - x_i^2; falls back to ±guess."""
        lo = np.full(self.nvars, -guess)
        hi = np.full(self.nvars, guess)
        for g in self.inequalities:
            terms = g.terms
            const = g.constant_term()
            others = {m: c for m, c in terms.items() if sum(m) > 0}
            if len(others) != 1:
                continue
            (mono, coeff), = others.items()
            active = [i for i, e in enumerate(mono) if e > 0]
            if len(active) != 1:
                continue
            i = active[0]
            if mono[i] == 1:
                # const + coeff*x_i >= 0
                if coeff > 0:
                    lo[i] = max(lo[i], -const / coeff)
                else:
                    hi[i] = min(hi[i], -const / coeff)
            elif mono[i] == 2 and coeff < 0 and const > 0:
                # const - |coeff|*x_i^2 >= 0
                r = float(np.sqrt(const / -coeff))
                lo[i] = max(lo[i], -r)
                hi[i] = min(hi[i], r)
        return lo, hi

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Rejection-sample n points from the set using its bounding box."""
        lo, hi = self.bounding_box()
        out = np.empty((0, self.nvars))
        attempts = 0
        while out.shape[0] < n:
            batch = rng.uniform(lo, hi, size=(max(4 * n, 256), self.nvars))
            keep = batch[self.contains_many(batch)]
            out = np.vstack([out, keep])
            attempts += 1
            if attempts > 200:
                raise RuntimeError("rejection sampling failed; set may be thin or empty")
        return out[:n]


@dataclass(frozen=True)
class BoundarySet:
    """Boundary {x : prod h_i(x) = 0} plus isolated pinned points.

    ``point_constraints`` holds (point, value) pairs pinning the boundary cost
    at zero-dimensional components such as the origin.
    """

    components: tuple[Polynomial, ...]
    point_constraints: tuple[tuple[tuple[float, ...], float], ...] = ()

    def __post_init__(self):
        nv = {h.nvars for h in self.components}
        if len(nv) > 1:
            raise ValueError("boundary component nvars mismatch")

    @property
    def nvars(self) -> int:
        if self.components:
            return self.components[0].nvars
        return len(self.point_constraints[0][0])


@dataclass(frozen=True)
class MultiplierSet:
    """Concrete multipliers indexing generators (or generator subsets).

    Quadratic-module multipliers are keyed by the generator index; preordering
    multipliers are keyed by 0/1 tuples selecting a subset of generators.
    Every stored multiplier must keep deg(s * g^nu) within ``max_degree``.
    """

    kind: str
    multipliers: dict
    max_degree: int

    def __post_init__(self):
        if self.kind not in (QUADRATIC_MODULE, PREORDERING):
            raise ValueError(f"unknown multiplier kind {self.kind!r}")


def generator_product(domain: SemialgebraicSet, nu) -> Polynomial:
    """g_1^{nu_1} * ... * g_k^{nu_k} for a 0/1 selection tuple."""
    prod = Polynomial.constant(domain.nvars, 1.0)
    for g, e in zip(domain.inequalities, nu):
        if e:
            prod = prod * g
    return prod


def d_operator(domain: SemialgebraicSet, S: MultiplierSet) -> Polynomial:
    """Weighted combination of generator products; nonnegative on the domain
    whenever every multiplier is a sum of squares."""
    k = len(domain.inequalities)
    total = Polynomial.zero(domain.nvars)
    if S.kind == QUADRATIC_MODULE:
        for idx, s in S.multipliers.items():
            if not isinstance(idx, int) or not 0 <= idx < k:
                raise ValueError(f"generator index {idx!r} out of range")
            g = domain.inequalities[idx]
            if s.degree() + g.degree() > S.max_degree:
                raise ValueError(
                    f"multiplier for generator {idx} exceeds degree budget "
                    f"{S.max_degree}"
                )
            total = total + s * g
    else:
        for nu, s in S.multipliers.items():
            if len(nu) != k or any(e not in (0, 1) for e in nu):
                raise ValueError(f"preordering index {nu!r} must be a 0/1 {k}-tuple")
            gp = generator_product(domain, nu)
            if s.degree() + gp.degree() > S.max_degree:
                raise ValueError(
                    f"multiplier for subset {nu} exceeds degree budget {S.max_degree}"
                )
            total = total + s * gp
    return total


def b_operator(
    p: Polynomial, boundary: BoundarySet, T: list[Polynomial]
) -> list[Polynomial]:
    """The family {p - t_i * h_i}; each member nonnegative certifies p >= 0
    on the corresponding boundary component."""
    if len(T) != len(boundary.components):
        raise ValueError(
            f"need {len(boundary.components)} multipliers, got {len(T)}"
        )
    return [p - t * h for t, h in zip(T, boundary.components)]


def product_domain(a: SemialgebraicSet, b: SemialgebraicSet) -> SemialgebraicSet:
    """Cartesian product over the concatenated variable vector (a first)."""
    n = a.nvars + b.nvars
    gens = [g.lift(n, 0) for g in a.inequalities]
    gens += [g.lift(n, a.nvars) for g in b.inequalities]
    return SemialgebraicSet(n, tuple(gens))


def halfspace_intersect(
    domain: SemialgebraicSet, var: int, sign: int
) -> SemialgebraicSet:
    """Append the generator sign * x_var (sign is +1 or -1)."""
    if not 0 <= var < domain.nvars:
        raise IndexError(f"variable index {var} out of range")
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    g = Polynomial.variable(domain.nvars, var).scale(float(sign))
    return SemialgebraicSet(domain.nvars, domain.inequalities + (g,))


def preordering_indices(k: int):
    """All 0/1 selection tuples over k generators, empty subset included."""
    return list(itertools.product((0, 1), repeat=k))
