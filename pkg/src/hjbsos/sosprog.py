"""Compile sum-of-squares programs into semidefinite programs.

An ``SosProgram`` holds named polynomial templates (one scalar decision
variable per monomial), standalone scalars, SOS membership constraints whose
expressions are affine in the decision coefficients, plain linear constraints
over the scalars, and a linear objective.

Each SOS constraint may carry *localizers*: domain generators g that receive
their own SOS multiplier.  The constraint compiled for expression E with
localizers (g_1, ..., g_k) and degree budget D is

    E(x) - sum_j  z_j(x)' Q_j z_j(x) * g_j(x)  =  z_0(x)' Q_0 z_0(x),
    Q_0, Q_1, ..., Q_k  PSD,

matched coefficient-by-coefficient over every monomial of degree <= D.  The
multiplier bases fill the budget: deg(s_j * g_j) <= D with deg(s_j) rounded
down to even.  Coefficient-matching rows are rescaled by their largest
absolute coefficient before solving; raw problem data (drift terms like 5x^2)
otherwise produces badly scaled rows.

Scalar inequalities become slack-variable equalities with the slack living in
a 1x1 PSD block.  The Gram basis is the full half-degree monomial basis; no
Newton-polytope pruning (problems here are small -- documented extension
point).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import sdp
from .polynomials import Monomial, Polynomial, grlex_key, monomials_upto

_SQRT2 = float(np.sqrt(2.0))


@dataclass(frozen=True)
class GramMap:
    """Half-degree monomial basis with the product-to-position index."""

    basis: tuple[Monomial, ...]
    index: dict[Monomial, tuple[tuple[int, int], ...]]

    def __len__(self) -> int:
        return len(self.basis)


def build_gram_basis(nvars: int, degree: int) -> GramMap:
    """Basis of all monomials with total degree <= degree/2, graded-lex."""
    if degree < 0 or degree % 2 != 0:
        raise ValueError(f"Gram basis degree must be even and >= 0, got {degree}")
    basis = tuple(monomials_upto(nvars, degree // 2))
    index: dict[Monomial, list[tuple[int, int]]] = {}
    for i, mi in enumerate(basis):
        for j in range(i, len(basis)):
            prod = tuple(a + b for a, b in zip(mi, basis[j]))
            index.setdefault(prod, []).append((i, j))
    return GramMap(basis=basis, index={k: tuple(v) for k, v in index.items()})


class AffinePolyExpr:
    """Polynomial-valued expression, affine in scalar decision variables:
    constant(x) + sum_v  w_v * coeff_v(x)."""

    __slots__ = ("nvars", "constant", "terms")

    def __init__(self, nvars: int, constant: Polynomial | None = None,
                 terms: dict[int, Polynomial] | None = None):
        self.nvars = nvars
        self.constant = constant if constant is not None else Polynomial.zero(nvars)
        self.terms = dict(terms or {})

    @staticmethod
    def from_poly(p: Polynomial) -> AffinePolyExpr:
        return AffinePolyExpr(p.nvars, constant=p)

    def __add__(self, other: AffinePolyExpr) -> AffinePolyExpr:
        out = dict(self.terms)
        for v, p in other.terms.items():
            out[v] = out[v] + p if v in out else p
        return AffinePolyExpr(self.nvars, self.constant + other.constant, out)

    def __sub__(self, other: AffinePolyExpr) -> AffinePolyExpr:
        return self + other.scale(-1.0)

    def __neg__(self) -> AffinePolyExpr:
        return self.scale(-1.0)

    def scale(self, factor: float) -> AffinePolyExpr:
        return AffinePolyExpr(
            self.nvars,
            self.constant.scale(factor),
            {v: p.scale(factor) for v, p in self.terms.items()},
        )

    def mul_poly(self, p: Polynomial) -> AffinePolyExpr:
        return AffinePolyExpr(
            self.nvars,
            self.constant * p,
            {v: q * p for v, q in self.terms.items()},
        )

    def map_poly(self, op) -> AffinePolyExpr:
        """Apply a linear polynomial operator to every coefficient polynomial."""
        return AffinePolyExpr(
            self.nvars, op(self.constant), {v: op(p) for v, p in self.terms.items()}
        )

    def degree(self) -> int:
        d = self.constant.degree() if not self.constant.is_zero() else 0
        for p in self.terms.values():
            if not p.is_zero():
                d = max(d, p.degree())
        return d

    def instantiate(self, values: np.ndarray) -> Polynomial:
        out = self.constant
        for v, p in self.terms.items():
            out = out + p.scale(float(values[v]))
        return out


@dataclass(frozen=True)
class PolyTemplate:
    name: str
    nvars: int
    degree: int
    monomials: tuple[Monomial, ...]
    var_offset: int

    def coefficient_var(self, exponents: Monomial) -> int:
        return self.var_offset + self.monomials.index(tuple(exponents))


@dataclass
class SosConstraint:
    name: str
    expr: AffinePolyExpr
    localizers: tuple[Polynomial, ...]
    degree: int


@dataclass
class LinearConstraint:
    coeffs: dict[int, float]
    rhs: float
    kind: str  # "eq" or "ge"
    name: str = ""


class SosProgram:
    """Free polynomial templates + SOS rows + linear rows + linear objective."""

    def __init__(self, nvars: int):
        self.nvars = nvars
        self.templates: dict[str, PolyTemplate] = {}
        self.scalar_names: list[str] = []
        self.sos_constraints: list[SosConstraint] = []
        self.linear_constraints: list[LinearConstraint] = []
        self.objective: dict[int, float] = {}

    @property
    def n_scalars(self) -> int:
        return len(self.scalar_names)

    def new_scalar(self, name: str) -> int:
        idx = len(self.scalar_names)
        self.scalar_names.append(name)
        return idx

    def new_poly(self, name: str, degree: int,
                 monomials: list[Monomial] | None = None) -> PolyTemplate:
        """Register a free polynomial template; one scalar per monomial."""
        if name in self.templates:
            raise ValueError(f"template {name!r} already defined")
        monos = tuple(monomials) if monomials is not None else tuple(
            monomials_upto(self.nvars, degree)
        )
        offset = len(self.scalar_names)
        for m in monos:
            self.scalar_names.append(f"{name}[{','.join(str(e) for e in m)}]")
        tpl = PolyTemplate(name=name, nvars=self.nvars, degree=degree,
                           monomials=monos, var_offset=offset)
        self.templates[name] = tpl
        return tpl

    def template_expr(self, name: str) -> AffinePolyExpr:
        tpl = self.templates[name]
        terms = {
            tpl.var_offset + k: Polynomial.monomial(self.nvars, m)
            for k, m in enumerate(tpl.monomials)
        }
        return AffinePolyExpr(self.nvars, terms=terms)

    def scalar_expr(self, idx: int) -> AffinePolyExpr:
        return AffinePolyExpr(
            self.nvars, terms={idx: Polynomial.constant(self.nvars, 1.0)}
        )

    def apply_to_template(self, name: str, op) -> AffinePolyExpr:
        """Apply a linear operator (Polynomial -> Polynomial) to a template."""
        tpl = self.templates[name]
        terms = {
            tpl.var_offset + k: op(Polynomial.monomial(self.nvars, m))
            for k, m in enumerate(tpl.monomials)
        }
        terms = {v: p for v, p in terms.items() if not p.is_zero()}
        return AffinePolyExpr(self.nvars, terms=terms)

    def template_value_coeffs(self, name: str, point) -> dict[int, float]:
        """Coefficients of the linear form w -> template(point)."""
        tpl = self.templates[name]
        out = {}
        for k, m in enumerate(tpl.monomials):
            val = 1.0
            for x, e in zip(point, m):
                if e:
                    val *= float(x) ** e
            out[tpl.var_offset + k] = val
        return out

    def add_sos(self, expr: AffinePolyExpr, degree: int,
                localizers: list[Polynomial] | None = None, name: str = "") -> None:
        if degree < 0 or degree % 2 != 0:
            raise ValueError(
                f"SOS constraint degree budget must be even, got {degree} ({name})"
            )
        if expr.degree() > degree:
            raise ValueError(
                f"expression degree {expr.degree()} exceeds budget {degree} ({name})"
            )
        locs = tuple(localizers or ())
        self.sos_constraints.append(
            SosConstraint(name=name or f"sos{len(self.sos_constraints)}",
                          expr=expr, localizers=locs, degree=degree)
        )

    def add_linear(self, coeffs: dict[int, float], rhs: float, kind: str = "eq",
                   name: str = "") -> None:
        if kind not in ("eq", "ge"):
            raise ValueError("linear constraint kind must be 'eq' or 'ge'")
        self.linear_constraints.append(
            LinearConstraint(coeffs=dict(coeffs), rhs=float(rhs), kind=kind, name=name)
        )

    def set_objective(self, coeffs: dict[int, float]) -> None:
        self.objective = dict(coeffs)


@dataclass
class _BlockInfo:
    constraint: int  # -1 for slack blocks
    gram: GramMap
    generator: Polynomial | None  # None means the plain SOS part


@dataclass
class Layout:
    """Deterministic mapping from a program to its SDP; compile and extract
    both derive it, so extraction never depends on compile-time state."""

    blocks: list[_BlockInfo]
    block_dims: list[int]
    n_scalars: int
    slack_rows: list[int]  # linear-constraint indices that received a slack


def _layout(prog: SosProgram) -> Layout:
    blocks: list[_BlockInfo] = []
    for ci, con in enumerate(prog.sos_constraints):
        blocks.append(_BlockInfo(ci, build_gram_basis(prog.nvars, con.degree), None))
        for g in con.localizers:
            budget = con.degree - g.degree()
            budget -= budget % 2
            if budget < 0:
                continue  # generator too high-degree to carry a multiplier
            blocks.append(_BlockInfo(ci, build_gram_basis(prog.nvars, budget), g))
    slack_rows = [
        li for li, lc in enumerate(prog.linear_constraints) if lc.kind == "ge"
    ]
    for li in slack_rows:
        blocks.append(
            _BlockInfo(-1, build_gram_basis(prog.nvars, 0), None)
        )
    return Layout(
        blocks=blocks,
        block_dims=[len(b.gram) for b in blocks],
        n_scalars=prog.n_scalars,
        slack_rows=slack_rows,
    )


def compile(prog: SosProgram) -> sdp.SdpProblem:
    """Lower the program to one equality-form SDP (one PSD block per SOS part)."""
    lay = _layout(prog)
    nw = prog.n_scalars
    col_offsets = [nw]
    for d in lay.block_dims:
        col_offsets.append(col_offsets[-1] + sdp.svec_len(d))
    ncols = col_offsets[-1]

    data: list[float] = []
    rows_idx: list[int] = []
    cols_idx: list[int] = []
    rhs: list[float] = []
    row = 0

    # map constraint index -> its blocks
    con_blocks: dict[int, list[int]] = {}
    for bi, info in enumerate(lay.blocks):
        if info.constraint >= 0:
            con_blocks.setdefault(info.constraint, []).append(bi)

    for ci, con in enumerate(prog.sos_constraints):
        monos = monomials_upto(prog.nvars, con.degree)
        row_of = {m: row + k for k, m in enumerate(monos)}
        nrows_here = len(monos)
        entries: dict[tuple[int, int], float] = {}
        local_rhs = np.zeros(nrows_here)

        for bi in con_blocks[ci]:
            info = lay.blocks[bi]
            basis = info.gram.basis
            gterms = (
                list(info.generator.terms.items())
                if info.generator is not None
                else [((0,) * prog.nvars, 1.0)]
            )
            col0 = col_offsets[bi]
            t = 0
            for i in range(len(basis)):
                for j in range(i, len(basis)):
                    base = tuple(a + b for a, b in zip(basis[i], basis[j]))
                    wgt = 1.0 if i == j else _SQRT2
                    for gm, gc in gterms:
                        prod = tuple(a + b for a, b in zip(base, gm))
                        r = row_of.get(prod)
                        if r is None:
                            raise ValueError(
                                f"constraint {con.name}: product monomial exceeds "
                                f"budget {con.degree}"
                            )
                        key = (r - row, col0 + t)
                        entries[key] = entries.get(key, 0.0) + wgt * gc
                    t += 1

        for v, p in con.expr.terms.items():
            for m, cc in p.terms.items():
                r = row_of.get(m)
                if r is None:
                    raise ValueError(
                        f"constraint {con.name}: expression degree exceeds budget"
                    )
                key = (r - row, v)
                entries[key] = entries.get(key, 0.0) - cc
        for m, cc in con.expr.constant.terms.items():
            r = row_of.get(m)
            if r is None:
                raise ValueError(
                    f"constraint {con.name}: expression degree exceeds budget"
                )
            local_rhs[r - row] += cc

        # per-row rescaling by the largest absolute coefficient
        rscale = np.ones(nrows_here)
        rmax = np.zeros(nrows_here)
        for (r, _c), v in entries.items():
            rmax[r] = max(rmax[r], abs(v))
        rmax = np.maximum(rmax, np.abs(local_rhs))
        nz = rmax > 0
        rscale[nz] = 1.0 / rmax[nz]
        for (r, c), v in entries.items():
            data.append(v * rscale[r])
            rows_idx.append(row + r)
            cols_idx.append(c)
        rhs.extend(local_rhs * rscale)
        row += nrows_here

    slack_seq = 0
    n_sos_blocks = sum(
        1 for b in lay.blocks if b.constraint >= 0
    )
    for li, lc in enumerate(prog.linear_constraints):
        scale = max(
            [abs(v) for v in lc.coeffs.values()] + [abs(lc.rhs)] + [1e-300]
        )
        for v, cc in lc.coeffs.items():
            data.append(cc / scale)
            rows_idx.append(row)
            cols_idx.append(v)
        if lc.kind == "ge":
            bi = n_sos_blocks + slack_seq
            slack_seq += 1
            data.append(-1.0 / scale)
            rows_idx.append(row)
            cols_idx.append(col_offsets[bi])
        rhs.append(lc.rhs / scale)
        row += 1

    A = sp.csr_matrix((data, (rows_idx, cols_idx)), shape=(row, ncols))
    c = np.zeros(nw)
    for v, cc in prog.objective.items():
        c[v] = cc
    return sdp.SdpProblem(
        block_dims=lay.block_dims, n_free=nw, c_free=c, rows=A, rhs=np.array(rhs)
    )


def gram_polynomial(gram: GramMap, Q: np.ndarray, nvars: int) -> Polynomial:
    """Expand z' Q z into a polynomial."""
    terms: dict[Monomial, float] = {}
    for prod, positions in gram.index.items():
        val = 0.0
        for (i, j) in positions:
            val += Q[i, j] if i == j else 2.0 * Q[i, j]
        if val != 0.0:
            terms[prod] = terms.get(prod, 0.0) + val
    return Polynomial(nvars, terms)


@dataclass
class Extraction:
    polys: dict[str, Polynomial]
    scalars: np.ndarray
    objective: float
    multipliers: dict[str, dict]  # per SOS constraint name


def extract(prog: SosProgram, sol: sdp.SdpSolution) -> Extraction:
    """Substitute solved scalars into templates; also expand the multipliers."""
    if sol.status != sdp.OPTIMAL:
        raise sdp.SdpError(f"cannot extract from status {sol.status!r}")
    lay = _layout(prog)
    w = np.asarray(sol.y_free)
    polys = {}
    for name, tpl in prog.templates.items():
        terms = {
            m: w[tpl.var_offset + k] for k, m in enumerate(tpl.monomials)
        }
        polys[name] = Polynomial(prog.nvars, terms)
    mults: dict[str, dict] = {}
    for bi, info in enumerate(lay.blocks):
        if info.constraint < 0:
            continue
        con = prog.sos_constraints[info.constraint]
        Q = sol.block_matrices[bi]
        p = gram_polynomial(info.gram, Q, prog.nvars)
        slot = mults.setdefault(con.name, {"sos": None, "multipliers": []})
        if info.generator is None:
            slot["sos"] = p
        else:
            slot["multipliers"].append((info.generator, p))
    obj = float(sum(w[v] * cc for v, cc in prog.objective.items()))
    return Extraction(polys=polys, scalars=w, objective=obj, multipliers=mults)


def certificate_residual(prog: SosProgram, sol: sdp.SdpSolution,
                         constraint_name: str) -> float:
    """Max |coefficient| of expression - (z'Qz + sum s_j g_j) for one row."""
    ext = extract(prog, sol)
    for con in prog.sos_constraints:
        if con.name == constraint_name:
            lhs = con.expr.instantiate(ext.scalars)
            rec = ext.multipliers[con.name]["sos"]
            for g, s in ext.multipliers[con.name]["multipliers"]:
                rec = rec + s * g
            return (lhs - rec).max_abs_coeff()
    raise KeyError(constraint_name)
