"""Sparse multivariate polynomial arithmetic over float64 coefficients.

A polynomial is a dict mapping exponent tuples to coefficients:

    x1^2*x2 + 3   ->   {(2, 1): 1.0, (0, 0): 3.0}      (nvars = 2)

Exponent tuples always have length ``nvars``.  Stored terms are kept in
canonical form: coefficients with absolute value below DROP_TOL are removed,
so the zero polynomial has an empty term dict.  Instances are treated as
immutable values after construction; nothing in this package mutates a
polynomial in place, which makes them safe to share across threads.

Canonical term order is graded lexicographic (total degree first, then the
exponent tuple), used everywhere a deterministic iteration order matters:
text output, monomial basis enumeration, coefficient vectors.

The text form is a sum of ``coeff*x1^a*x2^b`` terms with variables named
``x1 .. xn``.  Printing uses ``repr`` floats, so parse(format(p)) == p
bit-for-bit.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

# Terms with |coefficient| below this are not stored.
DROP_TOL = 1e-14

Monomial = tuple[int, ...]


def grlex_key(exponents: Monomial) -> tuple[int, Monomial]:
    """Sort key for graded lexicographic order (ascending)."""
    return (sum(exponents), exponents)


def monomials_upto(nvars: int, degree: int) -> list[Monomial]:
    """All exponent tuples of total degree <= degree, in graded-lex order."""
    if nvars < 1:
        raise ValueError("nvars must be >= 1")
    out: list[Monomial] = []

    def rec(prefix: list[int], remaining: int, budget: int) -> None:
        if remaining == 1:
            for e in range(budget + 1):
                out.append(tuple(prefix + [e]))
            return
        for e in range(budget + 1):
            rec(prefix + [e], remaining - 1, budget - e)

    rec([], nvars, degree)
    out.sort(key=grlex_key)
    return out


class Polynomial:
    """Immutable sparse polynomial in ``nvars`` variables."""

    __slots__ = ("nvars", "terms")

    def __init__(self, nvars: int, terms: dict[Monomial, float] | None = None):
        if nvars < 1:
            raise ValueError("nvars must be >= 1")
        clean: dict[Monomial, float] = {}
        for mono, coeff in (terms or {}).items():
            if len(mono) != nvars:
                raise ValueError(
                    f"exponent tuple {mono} has length {len(mono)}, expected {nvars}"
                )
            if any(e < 0 for e in mono):
                raise ValueError(f"negative exponent in {mono}")
            c = float(coeff)
            if abs(c) >= DROP_TOL:
                clean[tuple(int(e) for e in mono)] = c
        self.nvars = nvars
        self.terms = clean

    # -- constructors ------------------------------------------------------

    @staticmethod
    def zero(nvars: int) -> Polynomial:
        return Polynomial(nvars, {})

    @staticmethod
    def constant(nvars: int, value: float) -> Polynomial:
        return Polynomial(nvars, {(0,) * nvars: value})

    @staticmethod
    def variable(nvars: int, index: int) -> Polynomial:
        """The polynomial x_{index+1} (0-based index)."""
        if not 0 <= index < nvars:
            raise IndexError(f"variable index {index} out of range for nvars={nvars}")
        mono = tuple(1 if i == index else 0 for i in range(nvars))
        return Polynomial(nvars, {mono: 1.0})

    @staticmethod
    def monomial(nvars: int, exponents: Sequence[int], coeff: float = 1.0) -> Polynomial:
        return Polynomial(nvars, {tuple(exponents): coeff})

    # -- basic queries -----------------------------------------------------

    def degree(self) -> int:
        """Total degree; 0 for the zero polynomial."""
        if not self.terms:
            return 0
        return max(sum(m) for m in self.terms)

    def is_zero(self) -> bool:
        return not self.terms

    def coeff(self, exponents: Sequence[int]) -> float:
        return self.terms.get(tuple(exponents), 0.0)

    def constant_term(self) -> float:
        return self.terms.get((0,) * self.nvars, 0.0)

    def sorted_terms(self) -> list[tuple[Monomial, float]]:
        """Terms in descending graded-lex order (leading term first)."""
        return sorted(self.terms.items(), key=lambda t: grlex_key(t[0]), reverse=True)

    def max_abs_coeff(self) -> float:
        return max((abs(c) for c in self.terms.values()), default=0.0)

    # -- ring operations ---------------------------------------------------

    def _check_compatible(self, other: Polynomial) -> None:
        if self.nvars != other.nvars:
            raise ValueError(
                f"variable-count mismatch: {self.nvars} vs {other.nvars}"
            )

    def __add__(self, other: Polynomial) -> Polynomial:
        self._check_compatible(other)
        out = dict(self.terms)
        for mono, coeff in other.terms.items():
            out[mono] = out.get(mono, 0.0) + coeff
        return Polynomial(self.nvars, out)

    def __sub__(self, other: Polynomial) -> Polynomial:
        self._check_compatible(other)
        out = dict(self.terms)
        for mono, coeff in other.terms.items():
            out[mono] = out.get(mono, 0.0) - coeff
        return Polynomial(self.nvars, out)

    def __neg__(self) -> Polynomial:
        return self.scale(-1.0)

    def scale(self, factor: float) -> Polynomial:
        return Polynomial(self.nvars, {m: c * factor for m, c in self.terms.items()})

    def __mul__(self, other: Polynomial) -> Polynomial:
        self._check_compatible(other)
        out: dict[Monomial, float] = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                m = tuple(a + b for a, b in zip(m1, m2))
                out[m] = out.get(m, 0.0) + c1 * c2
        return Polynomial(self.nvars, out)

    def __pow__(self, k: int) -> Polynomial:
        if k < 0:
            raise ValueError("negative power")
        result = Polynomial.constant(self.nvars, 1.0)
        for _ in range(k):
            result = result * self
        return result

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Polynomial)
            and self.nvars == other.nvars
            and self.terms == other.terms
        )

    def __hash__(self) -> int:
        return hash((self.nvars, frozenset(self.terms.items())))

    def allclose(self, other: Polynomial, tol: float = 1e-9) -> bool:
        """Coefficient-wise comparison with absolute tolerance."""
        self._check_compatible(other)
        keys = set(self.terms) | set(other.terms)
        return all(
            abs(self.terms.get(k, 0.0) - other.terms.get(k, 0.0)) <= tol for k in keys
        )

    # -- calculus ----------------------------------------------------------

    def diff(self, var: int) -> Polynomial:
        """Formal partial derivative with respect to variable ``var``."""
        if not 0 <= var < self.nvars:
            raise IndexError(f"variable index {var} out of range for nvars={self.nvars}")
        out: dict[Monomial, float] = {}
        for mono, coeff in self.terms.items():
            e = mono[var]
            if e == 0:
                continue
            m = list(mono)
            m[var] = e - 1
            key = tuple(m)
            out[key] = out.get(key, 0.0) + coeff * e
        return Polynomial(self.nvars, out)

    def gradient(self) -> list[Polynomial]:
        return [self.diff(i) for i in range(self.nvars)]

    def hessian(self) -> list[list[Polynomial]]:
        grad = self.gradient()
        return [[g.diff(j) for j in range(self.nvars)] for g in grad]

    # -- evaluation --------------------------------------------------------

    def __call__(self, point: Sequence[float]) -> float:
        return self.eval(point)

    def eval(self, point: Sequence[float]) -> float:
        """Term-wise evaluation at a single point."""
        pt = np.asarray(point, dtype=float)
        if pt.shape != (self.nvars,):
            raise ValueError(f"point has shape {pt.shape}, expected ({self.nvars},)")
        total = 0.0
        for mono, coeff in self.terms.items():
            term = coeff
            for x, e in zip(pt, mono):
                if e:
                    term *= x**e
            total += term
        return total

    def eval_many(self, points: np.ndarray) -> np.ndarray:
        """Vectorized evaluation; ``points`` has shape (N, nvars)."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != self.nvars:
            raise ValueError(f"points must have shape (N, {self.nvars})")
        out = np.zeros(pts.shape[0])
        for mono, coeff in self.terms.items():
            term = np.full(pts.shape[0], coeff)
            for i, e in enumerate(mono):
                if e:
                    term = term * pts[:, i] ** e
            out += term
        return out

    # -- structure changes -------------------------------------------------

    def lift(self, nvars_total: int, offset: int = 0) -> Polynomial:
        """Embed into a larger variable vector, own variables starting at ``offset``."""
        if offset + self.nvars > nvars_total:
            raise ValueError("lift target too small")
        out: dict[Monomial, float] = {}
        for mono, coeff in self.terms.items():
            m = [0] * nvars_total
            m[offset : offset + self.nvars] = mono
            out[tuple(m)] = coeff
        return Polynomial(nvars_total, out)

    # -- text form ---------------------------------------------------------

    def format(self) -> str:
        """Canonical text form: repr coefficients, descending graded-lex terms."""
        if not self.terms:
            return "0"
        parts = []
        for mono, coeff in self.sorted_terms():
            factors = [repr(coeff)]
            for i, e in enumerate(mono):
                if e == 1:
                    factors.append(f"x{i + 1}")
                elif e > 1:
                    factors.append(f"x{i + 1}^{e}")
            parts.append("*".join(factors))
        return " + ".join(parts)

    def __repr__(self) -> str:
        return f"Polynomial({self.nvars}, {self.format()!r})"


def hessian_trace_form(p: Polynomial, S: PolyMatrix) -> Polynomial:
    """Tr((Hess p) S) as a polynomial; S must be square with side p.nvars."""
    n = p.nvars
    if S.rows != n or S.cols != n:
        raise ValueError(f"S must be {n}x{n}, got {S.rows}x{S.cols}")
    if S.nvars != n:
        raise ValueError("S entries must share nvars with p")
    hess = p.hessian()
    total = Polynomial.zero(n)
    for i in range(n):
        for j in range(n):
            total = total + hess[i][j] * S.entry(j, i)
    return total


@dataclass(frozen=True)
class PolyMatrix:
    """Row-major matrix of polynomials sharing one variable vector."""

    rows: int
    cols: int
    entries: tuple[Polynomial, ...]

    def __post_init__(self):
        if len(self.entries) != self.rows * self.cols:
            raise ValueError("entry count does not match rows*cols")
        nv = {p.nvars for p in self.entries}
        if len(nv) > 1:
            raise ValueError("all entries must share nvars")

    @property
    def nvars(self) -> int:
        return self.entries[0].nvars

    @staticmethod
    def from_lists(rows: Sequence[Sequence[Polynomial]]) -> PolyMatrix:
        r = len(rows)
        c = len(rows[0])
        flat = []
        for row in rows:
            if len(row) != c:
                raise ValueError("ragged rows")
            flat.extend(row)
        return PolyMatrix(r, c, tuple(flat))

    @staticmethod
    def from_numeric(array: np.ndarray, nvars: int) -> PolyMatrix:
        a = np.atleast_2d(np.asarray(array, dtype=float))
        flat = [Polynomial.constant(nvars, v) for v in a.ravel()]
        return PolyMatrix(a.shape[0], a.shape[1], tuple(flat))

    def entry(self, i: int, j: int) -> Polynomial:
        return self.entries[i * self.cols + j]

    def transpose(self) -> PolyMatrix:
        flat = [self.entry(j, i) for i in range(self.cols) for j in range(self.rows)]
        return PolyMatrix(self.cols, self.rows, tuple(flat))

    def matmul(self, other: PolyMatrix) -> PolyMatrix:
        if self.cols != other.rows:
            raise ValueError("shape mismatch in matmul")
        flat = []
        for i in range(self.rows):
            for j in range(other.cols):
                acc = Polynomial.zero(self.nvars)
                for k in range(self.cols):
                    acc = acc + self.entry(i, k) * other.entry(k, j)
                flat.append(acc)
        return PolyMatrix(self.rows, other.cols, tuple(flat))

    def scale(self, factor: float) -> PolyMatrix:
        return PolyMatrix(
            self.rows, self.cols, tuple(p.scale(factor) for p in self.entries)
        )

    def add(self, other: PolyMatrix) -> PolyMatrix:
        if (self.rows, self.cols) != (other.rows, other.cols):
            raise ValueError("shape mismatch in add")
        return PolyMatrix(
            self.rows,
            self.cols,
            tuple(a + b for a, b in zip(self.entries, other.entries)),
        )

    def eval(self, point: Sequence[float]) -> np.ndarray:
        out = np.empty((self.rows, self.cols))
        for i in range(self.rows):
            for j in range(self.cols):
                out[i, j] = self.entry(i, j).eval(point)
        return out

    def max_abs_coeff(self) -> float:
        return max((p.max_abs_coeff() for p in self.entries), default=0.0)

    def lift(self, nvars_total: int, offset: int = 0) -> PolyMatrix:
        return PolyMatrix(
            self.rows,
            self.cols,
            tuple(p.lift(nvars_total, offset) for p in self.entries),
        )


# -- parsing ----------------------------------------------------------------

_TERM_SPLIT = re.compile(r"(?<![eE*^([+\-])\s*([+\-])\s*")
_FACTOR = re.compile(r"^x(\d+)(?:\^(\d+))?$")
_NUMBER = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


def parse_polynomial(text: str, nvars: int) -> Polynomial:
    """Parse the canonical text form (also tolerates '-' joins and bare terms)."""
    s = text.strip()
    if not s:
        raise ValueError("empty polynomial string")
    if s in ("0", "0.0"):
        return Polynomial.zero(nvars)
    # Normalize to a list of signed terms.  Split on top-level +/- that are not
    # part of an exponent in scientific notation.
    s = s.replace("**", "^")
    pieces: list[str] = []
    sign = 1.0
    idx = 0
    for match in _TERM_SPLIT.finditer(s):
        chunk = s[idx : match.start()].strip()
        if chunk:
            pieces.append(chunk if sign > 0 else "-" + chunk)
        sign = 1.0 if match.group(1) == "+" else -1.0
        idx = match.end()
    chunk = s[idx:].strip()
    if chunk:
        pieces.append(chunk if sign > 0 else "-" + chunk)

    terms: dict[Monomial, float] = {}
    for piece in pieces:
        body = piece.lstrip()
        coeff = 1.0
        if body.startswith("-"):
            coeff = -1.0
            body = body[1:].strip()
        elif body.startswith("+"):
            body = body[1:].strip()
        expo = [0] * nvars
        for factor in (f.strip() for f in body.split("*")):
            if not factor:
                raise ValueError(f"malformed term {piece!r}")
            m = _FACTOR.match(factor)
            if m:
                var = int(m.group(1))
                if not 1 <= var <= nvars:
                    raise ValueError(f"variable x{var} out of range (nvars={nvars})")
                expo[var - 1] += int(m.group(2) or 1)
            elif _NUMBER.match(factor):
                coeff *= float(factor)
            else:
                raise ValueError(f"cannot parse factor {factor!r} in {piece!r}")
        key = tuple(expo)
        terms[key] = terms.get(key, 0.0) + coeff
    return Polynomial(nvars, terms)


def parse_poly_matrix(rows: Sequence[Sequence[str]], nvars: int) -> PolyMatrix:
    return PolyMatrix.from_lists(
        [[parse_polynomial(cell, nvars) for cell in row] for row in rows]
    )
