"""Sum-of-squares programs over semialgebraic sets, compiled to block SDPs.

A program holds decision polynomials (free coefficients on monomial bases),
coefficient-linear identities, nonnegativity constraints certified through
quadratic-module (Putinar) representations

    expr = sigma_0 + sum_j sigma_j g_j + sum_l q_l h_l,

and an optional least-squares objective encoded as a Schur-complement
epigraph block.  Compilation ordering is fully deterministic so identical
programs produce identical SDP triplets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import sdp
from .poly import (Exponents, Polynomial, VarSpace, eval_poly, monomial_basis,
                   mul, poly_to_text, StackedPolyEval)

SQRT2 = math.sqrt(2.0)


class SosError(ValueError):
    pass


class DegreeTooSmall(SosError):
    pass


class IdentityInfeasible(SosError):
    pass


# -- affine-in-decision polynomials ------------------------------------------

@dataclass
class LinCoeff:
    """Affine functional of the decision coefficients: const + sum w_i c_i."""

    const: float = 0.0
    lin: Dict[int, float] = field(default_factory=dict)

    def copy(self) -> "LinCoeff":
        return LinCoeff(self.const, dict(self.lin))

    def add(self, other: "LinCoeff", scale: float = 1.0):
        self.const += scale * other.const
        for i, w in other.lin.items():
            v = self.lin.get(i, 0.0) + scale * w
            if v == 0.0:
                self.lin.pop(i, None)
            else:
                self.lin[i] = v

    def is_zero(self) -> bool:
        return self.const == 0.0 and not self.lin

    def value(self, coeffs: np.ndarray) -> float:
        return self.const + sum(w * coeffs[i] for i, w in sorted(self.lin.items()))


class AffinePoly:
    """Polynomial whose coefficients are affine in the decision coefficients."""

    def __init__(self, space: VarSpace, terms: Optional[Dict[Exponents, LinCoeff]] = None):
        self.space = space
        self.terms: Dict[Exponents, LinCoeff] = terms or {}

    @staticmethod
    def from_poly(p: Polynomial) -> "AffinePoly":
        return AffinePoly(p.space, {e: LinCoeff(c) for e, c in p.terms.items()})

    def copy(self) -> "AffinePoly":
        return AffinePoly(self.space, {e: lc.copy() for e, lc in self.terms.items()})

    def total_degree(self) -> int:
        degs = [sum(e) for e, lc in self.terms.items() if not lc.is_zero()]
        return max(degs) if degs else 0

    def add(self, other: "AffinePoly", scale: float = 1.0) -> "AffinePoly":
        out = self.copy()
        for e, lc in other.terms.items():
            tgt = out.terms.setdefault(e, LinCoeff())
            tgt.add(lc, scale)
        out._prune()
        return out

    def __add__(self, other):
        return self.add(other)

    def __sub__(self, other):
        return self.add(other, -1.0)

    def mul_poly(self, p: Polynomial) -> "AffinePoly":
        out = AffinePoly(self.space)
        for e1, lc in self.terms.items():
            for e2, c2 in p.terms.items():
                e = tuple(a + b for a, b in zip(e1, e2))
                out.terms.setdefault(e, LinCoeff()).add(lc, c2)
        out._prune()
        return out

    def substitute(self, assignments: Dict[int, float]) -> "AffinePoly":
        out = AffinePoly(self.space)
        for exps, lc in self.terms.items():
            factor = 1.0
            new = list(exps)
            for idx, val in assignments.items():
                e = exps[idx]
                if e:
                    factor *= float(val) ** e
                    new[idx] = 0
            if factor == 0.0:
                continue
            out.terms.setdefault(tuple(new), LinCoeff()).add(lc, factor)
        out._prune()
        return out

    def substitute_linear(self, index: int, replacement: Polynomial) -> "AffinePoly":
        out = AffinePoly(self.space)
        for exps, lc in self.terms.items():
            e = exps[index]
            new = list(exps)
            new[index] = 0
            factor = Polynomial(self.space, {tuple(new): 1.0})
            for _ in range(e):
                factor = mul(factor, replacement)
            for fe, fc in factor.terms.items():
                out.terms.setdefault(fe, LinCoeff()).add(lc, fc)
        out._prune()
        return out

    def variables(self) -> set:
        used = set()
        for e, lc in self.terms.items():
            if lc.is_zero():
                continue
            used.update(i for i, k in enumerate(e) if k)
        return used

    def instantiate(self, coeffs: np.ndarray) -> Polynomial:
        return Polynomial(self.space, {e: lc.value(coeffs) for e, lc in self.terms.items()})

    def eval_lincoeff(self, point: Sequence[float]) -> LinCoeff:
        """Evaluate at a numeric point; the result is affine in decisions."""
        out = LinCoeff()
        for exps, lc in sorted(self.terms.items()):
            v = 1.0
            for x, e in zip(point, exps):
                if e:
                    v *= x ** e
            out.add(lc, v)
        return out

    def _prune(self):
        dead = [e for e, lc in self.terms.items() if lc.is_zero()]
        for e in dead:
            del self.terms[e]


# -- semialgebraic sets --------------------------------------------------------

def _single_var_bound(g: Polynomial) -> Optional[Tuple[int, float, bool]]:
    """Recognize c1*x_i + c0 >= 0; returns (i, bound, is_lower) or None."""
    coef: Dict[int, float] = {}
    const = 0.0
    for e, c in g.terms.items():
        deg = sum(e)
        if deg == 0:
            const = c
        elif deg == 1:
            coef[e.index(1)] = coef.get(e.index(1), 0.0) + c
        else:
            return None
    if len(coef) != 1:
        return None
    (i, ci), = coef.items()
    return (i, -const / ci, ci > 0)


@dataclass
class SemialgebraicSet:
    """{v : g_j(v) >= 0, h_l(v) = 0}; optional archimedean ball appended at compile."""

    space: VarSpace
    inequalities: List[Polynomial] = field(default_factory=list)
    equalities: List[Polynomial] = field(default_factory=list)
    archimedean_radius: Optional[float] = None

    def compile_inequalities(self) -> List[Polynomial]:
        gs = list(self.inequalities)
        if self.archimedean_radius is not None:
            terms = {(0,) * self.space.dim: float(self.archimedean_radius)}
            for i in range(self.space.dim):
                e = [0] * self.space.dim
                e[i] = 2
                terms[tuple(e)] = -1.0
            gs.append(Polynomial(self.space, terms))
        return gs

    def sample_box(self) -> List[Tuple[float, float]]:
        """Per-variable box inferred from single-variable linear inequalities."""
        lows: Dict[int, float] = {}
        highs: Dict[int, float] = {}
        for g in self.inequalities:
            info = _single_var_bound(g)
            if info is None:
                continue
            i, bound, is_lower = info
            if is_lower:
                lows[i] = max(lows.get(i, bound), bound)
            else:
                highs[i] = min(highs.get(i, bound), bound)
        box = []
        for i in range(self.space.dim):
            lo = lows.get(i)
            hi = highs.get(i)
            if lo is None and hi is None:
                lo, hi = -1.0, 1.0
            elif lo is None:
                lo = hi - 1.0
            elif hi is None:
                hi = lo + 1.0
            box.append((lo, hi))
        return box

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform samples of the set via box sampling with rejection."""
        box = self.sample_box()
        lo = np.array([b[0] for b in box])
        hi = np.array([b[1] for b in box])
        out: List[np.ndarray] = []
        for _ in range(200):
            pts = rng.uniform(lo, hi, size=(max(n, 64), self.space.dim))
            for p in pts:
                if all(eval_poly(g, p) >= -1e-12 for g in self.inequalities) and \
                   all(abs(eval_poly(h, p)) <= 1e-9 for h in self.equalities):
                    out.append(p)
                    if len(out) == n:
                        return np.array(out)
        raise SosError("sampler failed: set appears empty or thin")


# -- certificates --------------------------------------------------------------

@dataclass
class ConstraintCertificate:
    gram_sigma0: np.ndarray
    basis_sigma0: List[Exponents]
    gram_sigmas: List[np.ndarray]
    bases_sigmas: List[List[Exponents]]
    multipliers_g: List[Polynomial]
    q_polys: List[Polynomial]
    h_polys: List[Polynomial]
    reconstruction: Polynomial
    expr_value: Polynomial
    delta_achieved: float


@dataclass
class Certificate:
    constraints: List[ConstraintCertificate]

    @property
    def delta_achieved(self) -> float:
        if not self.constraints:
            return 0.0
        return max(c.delta_achieved for c in self.constraints)

    def dump(self, path: str):
        with open(path, "w") as fh:
            for idx, cc in enumerate(self.constraints):
                fh.write(f"constraint {idx}\n")
                fh.write(f"  identity residual bound {cc.delta_achieved!r}\n")
                fh.write(f"  sigma0 gram dim {cc.gram_sigma0.shape[0]}\n")
                for row in cc.gram_sigma0:
                    fh.write("    " + " ".join(repr(v) for v in row) + "\n")
                for j, (G, g) in enumerate(zip(cc.gram_sigmas, cc.multipliers_g)):
                    fh.write(f"  sigma_{j + 1} for g = {poly_to_text(g)} dim {G.shape[0]}\n")
                    for row in G:
                        fh.write("    " + " ".join(repr(v) for v in row) + "\n")
                for l, (q, h) in enumerate(zip(cc.q_polys, cc.h_polys)):
                    fh.write(f"  q_{l} for h = {poly_to_text(h)}: {poly_to_text(q)}\n")


# -- program --------------------------------------------------------------------

@dataclass
class _NonnegConstraint:
    expr: AffinePoly
    domain: SemialgebraicSet
    degree: int


class _CertPlan:
    def __init__(self):
        # (basis, svec offset, g or None for sigma_0)
        self.gram_pieces: List[Tuple[List[Exponents], int, Optional[Polynomial]]] = []
        # (basis, absolute column offset, h)
        self.q_pieces: List[Tuple[List[Exponents], int, Polynomial]] = []
        self.block_ids: List[int] = []


def _gl_key(e: Exponents):
    return (sum(e), tuple(-k for k in e))


def _triu_pos(n: int, i: int, j: int) -> int:
    """Position of (i, j), i <= j, in row-major upper-triangular order."""
    return i * n - i * (i - 1) // 2 + (j - i)


def _support_vars(p: Polynomial) -> set:
    used = set()
    for e in p.terms:
        used.update(i for i, k in enumerate(e) if k)
    return used


class SosProgram:
    def __init__(self, space: VarSpace):
        self.space = space
        self.n_decisions = 0
        self.identities: List[AffinePoly] = []
        self.nonneg: List[_NonnegConstraint] = []
        self.lsq_rows: Optional[List[Dict[int, float]]] = None
        self.lsq_target: Optional[np.ndarray] = None
        self._layout: Optional["_Layout"] = None

    # -- declarations ---------------------------------------------------------

    def declare_poly(self, max_degree: int, active: Optional[Sequence[int]] = None) -> AffinePoly:
        return self.declare_poly_on_basis(monomial_basis(self.space.dim, max_degree, active))

    def declare_poly_on_basis(self, basis: Sequence[Exponents]) -> AffinePoly:
        terms = {}
        for e in basis:
            terms[tuple(e)] = LinCoeff(0.0, {self.n_decisions: 1.0})
            self.n_decisions += 1
        return AffinePoly(self.space, terms)

    # -- constraints ----------------------------------------------------------

    def add_poly_identity(self, expr: AffinePoly):
        """Constrain expr == 0 as one linear equality per monomial."""
        if isinstance(expr, Polynomial):
            expr = AffinePoly.from_poly(expr)
        for e, lc in expr.terms.items():
            if not lc.lin and lc.const != 0.0:
                raise IdentityInfeasible(
                    f"identity fixes monomial {e} to constant {lc.const} != 0")
        self.identities.append(expr.copy())

    def add_nonneg_on(self, expr, domain: SemialgebraicSet, degree: int):
        if isinstance(expr, Polynomial):
            expr = AffinePoly.from_poly(expr)
        if degree < expr.total_degree():
            raise DegreeTooSmall(
                f"multiplier degree {degree} < expression degree {expr.total_degree()}")
        for g in domain.compile_inequalities():
            if g.total_degree() > degree:
                raise DegreeTooSmall("inequality degree exceeds certificate degree")
        for h in domain.equalities:
            if h.total_degree() > degree:
                raise DegreeTooSmall("equality degree exceeds certificate degree")
        self.nonneg.append(_NonnegConstraint(expr.copy(), domain, degree))

    def set_lsq_objective(self, rows: List[Dict[int, float]], target: Sequence[float]):
        target = np.asarray(target, dtype=float)
        if len(rows) != len(target):
            raise SosError("objective rows and target lengths differ")
        self.lsq_rows = [dict(r) for r in rows]
        self.lsq_target = target

    def add_residual(self, value: LinCoeff, target: float):
        """Append one scalar residual (value - target) to the LSQ objective."""
        if self.lsq_rows is None:
            self.lsq_rows = []
            self.lsq_target = np.zeros(0)
        self.lsq_rows.append(dict(value.lin))
        self.lsq_target = np.append(self.lsq_target, float(target) - value.const)

    # -- compilation ----------------------------------------------------------

    def compile(self) -> sdp.SdpProblem:
        layout = _Layout(self)
        dec0 = layout.svec_total  # decision i lives at column dec0 + i
        rows_i: List[int] = []
        cols_i: List[int] = []
        vals: List[float] = []
        b: List[float] = []
        row_counter = 0

        def add_row(entries: Dict[int, float], rhs: float):
            nonlocal row_counter
            for col in sorted(entries):
                v = entries[col]
                if v != 0.0:
                    rows_i.append(row_counter)
                    cols_i.append(col)
                    vals.append(v)
            b.append(rhs)
            row_counter += 1

        for ident in self.identities:
            for e in sorted(ident.terms, key=_gl_key):
                lc = ident.terms[e]
                if not lc.lin:
                    if lc.const != 0.0:
                        raise IdentityInfeasible(
                            f"identity fixes monomial {e} to constant {lc.const} != 0")
                    continue
                add_row({dec0 + i: w for i, w in lc.lin.items()}, -lc.const)

        one = (0,) * self.space.dim
        for ci, con in enumerate(self.nonneg):
            plan = layout.cert_plans[ci]
            mono_rows: Dict[Exponents, Dict[int, float]] = {}
            mono_rhs: Dict[Exponents, float] = {}

            def touch(e) -> Dict[int, float]:
                r = mono_rows.get(e)
                if r is None:
                    r = {}
                    mono_rows[e] = r
                    mono_rhs[e] = 0.0
                return r

            for e, lc in con.expr.terms.items():
                r = touch(e)
                for i, w in lc.lin.items():
                    r[dec0 + i] = r.get(dec0 + i, 0.0) + w
                mono_rhs[e] -= lc.const

            for basis, offset, g in plan.gram_pieces:
                g_terms = list(g.terms.items()) if g is not None else [(one, 1.0)]
                nb = len(basis)
                for r_i in range(nb):
                    for c_i in range(r_i, nb):
                        coef = 1.0 if r_i == c_i else SQRT2
                        col = offset + _triu_pos(nb, r_i, c_i)
                        base = tuple(a + bq for a, bq in zip(basis[r_i], basis[c_i]))
                        for ge, gc in g_terms:
                            e = tuple(a + bq for a, bq in zip(base, ge))
                            row = touch(e)
                            row[col] = row.get(col, 0.0) - coef * gc

            for q_basis, q_offset, h in plan.q_pieces:
                for qi, qe in enumerate(q_basis):
                    col = q_offset + qi
                    for he, hc in h.terms.items():
                        e = tuple(a + bq for a, bq in zip(qe, he))
                        row = touch(e)
                        row[col] = row.get(col, 0.0) - hc

            for e in sorted(mono_rows, key=_gl_key):
                add_row(mono_rows[e], mono_rhs[e])

        c = np.zeros(layout.n_vars)
        if self.lsq_rows is not None:
            R = len(self.lsq_rows)
            nb = R + 1
            offset = layout.epigraph_offset
            for i in range(R):
                for j in range(i, R):
                    add_row({offset + _triu_pos(nb, i, j): 1.0}, 1.0 if i == j else 0.0)
            for i, row in enumerate(self.lsq_rows):
                entries = {offset + _triu_pos(nb, i, R): 1.0}
                for di, w in row.items():
                    col = dec0 + di
                    entries[col] = entries.get(col, 0.0) - SQRT2 * w
                add_row(entries, -SQRT2 * self.lsq_target[i])
            c[offset + _triu_pos(nb, R, R)] = 1.0

        A = sp.csr_matrix((vals, (rows_i, cols_i)), shape=(row_counter, layout.n_vars))
        self._layout = layout
        return sdp.SdpProblem(layout.blocks, layout.free_dim, A, np.array(b), c)

    def extract(self, sol: sdp.SdpSolution,
                delta_samples: int = 1000) -> Tuple[np.ndarray, Certificate]:
        if self._layout is None:
            raise SosError("compile() must run before extract()")
        layout = self._layout
        coeffs = sol.free[:self.n_decisions].copy()
        rng = np.random.default_rng(0)
        certs = []
        for ci, con in enumerate(self.nonneg):
            plan = layout.cert_plans[ci]
            grams = [sol.blocks[bi] for bi in plan.block_ids]
            q_polys = []
            hs = []
            for q_basis, q_offset, h in plan.q_pieces:
                q_terms = {}
                for qi, qe in enumerate(q_basis):
                    val = sol.free[q_offset - layout.svec_total + qi]
                    if val != 0.0:
                        q_terms[qe] = val
                q_polys.append(Polynomial(self.space, q_terms))
                hs.append(h)

            recon = Polynomial.zero(self.space)
            bases = []
            gs = []
            for (basis, _, g), G in zip(plan.gram_pieces, grams):
                sigma = _gram_poly(self.space, basis, G)
                if g is not None:
                    sigma = mul(sigma, g)
                    gs.append(g)
                recon = recon + sigma
                bases.append(basis)
            for q, h in zip(q_polys, hs):
                recon = recon + mul(q, h)

            expr_poly = con.expr.instantiate(coeffs)
            residual = expr_poly - recon
            if not residual.terms:
                delta = 0.0
            else:
                pts = _box_samples(con.domain, delta_samples, rng)
                delta = float(np.max(np.abs(StackedPolyEval([residual]).eval_many(pts))))
            certs.append(ConstraintCertificate(
                gram_sigma0=grams[0],
                basis_sigma0=plan.gram_pieces[0][0],
                gram_sigmas=grams[1:],
                bases_sigmas=bases[1:],
                multipliers_g=gs,
                q_polys=q_polys,
                h_polys=hs,
                reconstruction=recon,
                expr_value=expr_poly,
                delta_achieved=delta,
            ))
        return coeffs, Certificate(certs)

    def polish(self, prob: sdp.SdpProblem, sol: sdp.SdpSolution,
               rounds: int = 200, verbose: bool = False) -> sdp.SdpSolution:
        """Refine an approximate solution to machine-precision feasibility.

        The certificate problems have singular optima with no relative
        interior, so interior-point iterates level off short of the accuracy
        the certificates need.  Starting from the best iterate, this
        alternates exact minimum-norm projection onto the affine constraints
        (through a factorized A A') with projection of every svec block onto
        the PSD cone, which converges fast because the iterate starts close to
        the intersection.  The last step is an affine projection, so the
        certificate identity holds to machine precision and the Gram
        eigenvalue floor is only as negative as one PSD projection step.
        """
        x = sol.stacked_primal(prob)
        x_in = x.copy()
        A = prob.A.tocsr()
        m = prob.b.size
        AAt = (A @ A.T).tocsc()
        solve = spla.factorized(AAt + 1e-14 * sp.eye(m, format="csc"))
        slices = prob.block_slices()

        def affine(z):
            return z + A.T @ solve(prob.b - A @ z)

        for _ in range(rounds):
            x = affine(x)
            for k, sl in zip(prob.blocks, slices):
                M = sdp.smat(x[sl], k)
                w, V = np.linalg.eigh(0.5 * (M + M.T))
                if w[0] < 0.0:
                    x[sl] = sdp.svec((V * np.maximum(w, 0.0)) @ V.T)
        x = affine(x)

        norm_b = np.linalg.norm(prob.b)
        norm_c = np.linalg.norm(prob.c)
        res_new = sdp._residuals(prob.A, prob.b, prob.c, x, sol.dual,
                                 sol.dual_slack, norm_b, norm_c)
        res_old = sdp._residuals(prob.A, prob.b, prob.c, x_in, sol.dual,
                                 sol.dual_slack, norm_b, norm_c)
        if verbose:
            print(f"polish prim {res_old[0]:.2e} -> {res_new[0]:.2e}")
        if res_new[0] >= res_old[0]:
            return sol
        n_svec = prob.n_vars - prob.free_dim
        blocks = [sdp.smat(x[sl], k) for k, sl in zip(prob.blocks, slices)]
        return sdp.SdpSolution(blocks, x[n_svec:].copy(), sol.dual,
                               sol.dual_slack, "Polished", res_new,
                               sol.iterations, float(prob.c @ x))


class _Layout:
    """Deterministic variable/block layout shared by compile and extract."""

    def __init__(self, prog: SosProgram):
        self.blocks: List[int] = []
        self.cert_plans: List[_CertPlan] = []
        svec_offset = 0
        block_id = 0
        for con in prog.nonneg:
            gs = con.domain.compile_inequalities()
            active = sorted(con.expr.variables()
                            | set().union(*[_support_vars(g) for g in gs], set())
                            | set().union(*[_support_vars(h) for h in con.domain.equalities], set()))
            d = con.degree
            plan = _CertPlan()
            pieces: List[Tuple[List[Exponents], Optional[Polynomial]]] = []
            pieces.append((monomial_basis(prog.space.dim, d // 2, active), None))
            for g in gs:
                half = -((g.total_degree() - d) // 2)  # ceil((d - deg g) / 2)
                pieces.append((monomial_basis(prog.space.dim, half, active), g))
            for basis, g in pieces:
                nb = len(basis)
                self.blocks.append(nb)
                plan.block_ids.append(block_id)
                block_id += 1
                plan.gram_pieces.append((basis, svec_offset, g))
                svec_offset += sdp.tri_size(nb)
            plan._q_meta = []
            for h in con.domain.equalities:
                qdeg = con.degree - h.total_degree()
                plan._q_meta.append((monomial_basis(prog.space.dim, qdeg, active), h))
            self.cert_plans.append(plan)
        self.epigraph_offset = svec_offset
        if prog.lsq_rows is not None:
            nb = len(prog.lsq_rows) + 1
            self.blocks.append(nb)
            svec_offset += sdp.tri_size(nb)
        self.svec_total = svec_offset
        free_cursor = svec_offset + prog.n_decisions
        for plan in self.cert_plans:
            for q_basis, h in plan._q_meta:
                plan.q_pieces.append((q_basis, free_cursor, h))
                free_cursor += len(q_basis)
            del plan._q_meta
        self.free_dim = free_cursor - svec_offset
        self.n_vars = free_cursor


def _gram_poly(space: VarSpace, basis: Sequence[Exponents], G: np.ndarray) -> Polynomial:
    terms: Dict[Exponents, float] = {}
    nb = len(basis)
    for i in range(nb):
        for j in range(nb):
            e = tuple(a + bq for a, bq in zip(basis[i], basis[j]))
            terms[e] = terms.get(e, 0.0) + G[i, j]
    return Polynomial(space, terms)


def _box_samples(domain: SemialgebraicSet, n: int, rng: np.random.Generator) -> np.ndarray:
    box = domain.sample_box()
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    return rng.uniform(lo, hi, size=(n, domain.space.dim))


# -- empirical delta-satisfiability -------------------------------------------

def check_delta_satisfiability(expr: Polynomial, domain: SemialgebraicSet,
                               certificate: Optional[Certificate] = None,
                               n_samples: int = 1000,
                               rng: Optional[np.random.Generator] = None) -> float:
    """Empirical lower bound on the constraint violation of expr over the set.

    Returns max(0, -min expr) over uniform samples of the set; 0 means no
    violation was found at the sampled points.
    """
    rng = rng or np.random.default_rng(0)
    pts = domain.sample(n_samples, rng)
    vals = StackedPolyEval([expr]).eval_many(pts)[:, 0]
    return float(max(0.0, -np.min(vals)))
