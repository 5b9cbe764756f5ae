"""Sparse multivariate polynomials over a fixed, ordered variable set.

State coordinates come first in the variable ordering, control coordinates
after.  Polynomials are immutable after construction and exact: only
coefficients that are exactly zero are dropped, so the layer is safe to use
inside deterministic program compilation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

Exponents = Tuple[int, ...]


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class VarSpace:
    """Ordered variable identifiers shared by a family of polynomials."""

    names: Tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("variable names must be unique")
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def dim(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


def _normalize(terms: Mapping[Exponents, float], dim: int) -> Dict[Exponents, float]:
    out: Dict[Exponents, float] = {}
    for exps, coeff in terms.items():
        exps = tuple(int(e) for e in exps)
        if len(exps) != dim:
            raise DimensionMismatch(f"exponent tuple {exps} has wrong length, expected {dim}")
        if any(e < 0 for e in exps):
            raise ValueError("negative exponent")
        c = out.get(exps, 0.0) + float(coeff)
        if c == 0.0:
            out.pop(exps, None)
        else:
            out[exps] = c
    return {k: v for k, v in out.items() if v != 0.0}


@dataclass(frozen=True)
class Polynomial:
    """Exponent-map -> coefficient representation; empty map is the zero polynomial."""

    space: VarSpace
    terms: Dict[Exponents, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "terms", _normalize(self.terms, self.space.dim))

    # -- constructors -------------------------------------------------------

    @staticmethod
    def zero(space: VarSpace) -> "Polynomial":
        return Polynomial(space, {})

    @staticmethod
    def constant(space: VarSpace, c: float) -> "Polynomial":
        return Polynomial(space, {(0,) * space.dim: c})

    @staticmethod
    def variable(space: VarSpace, index: int) -> "Polynomial":
        if not 0 <= index < space.dim:
            raise IndexError(f"variable index {index} out of range")
        exps = [0] * space.dim
        exps[index] = 1
        return Polynomial(space, {tuple(exps): 1.0})

    # -- queries -------------------------------------------------------------

    @property
    def is_zero(self) -> bool:
        return not self.terms

    def total_degree(self) -> int:
        if not self.terms:
            return 0
        return max(sum(e) for e in self.terms)

    def sorted_terms(self) -> List[Tuple[Exponents, float]]:
        """Terms in lexicographic exponent order (fixed arithmetic order)."""
        return sorted(self.terms.items())

    # -- arithmetic ----------------------------------------------------------

    def _check_space(self, other: "Polynomial"):
        if self.space != other.space:
            raise DimensionMismatch("polynomials live in different variable spaces")

    def __add__(self, other: "Polynomial") -> "Polynomial":
        self._check_space(other)
        terms = dict(self.terms)
        for e, c in other.terms.items():
            terms[e] = terms.get(e, 0.0) + c
        return Polynomial(self.space, terms)

    def __neg__(self) -> "Polynomial":
        return Polynomial(self.space, {e: -c for e, c in self.terms.items()})

    def __sub__(self, other: "Polynomial") -> "Polynomial":
        return self + (-other)

    def scale(self, s: float) -> "Polynomial":
        return Polynomial(self.space, {e: c * s for e, c in self.terms.items()})

    def __mul__(self, other: "Polynomial") -> "Polynomial":
        return mul(self, other)


def eval_poly(p: Polynomial, point: Sequence[float]) -> float:
    """Evaluate p at a point, terms iterated in lexicographic exponent order."""
    if len(point) != p.space.dim:
        raise DimensionMismatch(f"point has length {len(point)}, expected {p.space.dim}")
    total = 0.0
    for exps, coeff in p.sorted_terms():
        v = coeff
        for x, e in zip(point, exps):
            if e:
                v *= x ** e
        total += v
    return total


def mul(p: Polynomial, q: Polynomial) -> Polynomial:
    """Exact convolution product of two polynomials over the same space."""
    p._check_space(q)
    terms: Dict[Exponents, float] = {}
    for e1, c1 in p.terms.items():
        for e2, c2 in q.terms.items():
            e = tuple(a + b for a, b in zip(e1, e2))
            terms[e] = terms.get(e, 0.0) + c1 * c2
    return Polynomial(p.space, terms)


def partial(p: Polynomial, var: int) -> Polynomial:
    """Term-wise power-rule partial derivative with respect to variable `var`."""
    if not 0 <= var < p.space.dim:
        raise IndexError(f"variable index {var} out of range")
    terms: Dict[Exponents, float] = {}
    for exps, coeff in p.terms.items():
        e = exps[var]
        if e == 0:
            continue
        new = list(exps)
        new[var] = e - 1
        key = tuple(new)
        terms[key] = terms.get(key, 0.0) + coeff * e
    return Polynomial(p.space, terms)


def substitute(p: Polynomial, assignments: Mapping[int, float]) -> Polynomial:
    """Eliminate assigned variables, folding their powers into coefficients.

    The result still lives in the same VarSpace; the assigned variables simply
    no longer appear.
    """
    for idx in assignments:
        if not 0 <= idx < p.space.dim:
            raise IndexError(f"variable index {idx} out of range")
    terms: Dict[Exponents, float] = {}
    for exps, coeff in p.terms.items():
        c = coeff
        new = list(exps)
        for idx, val in assignments.items():
            e = exps[idx]
            if e:
                c *= float(val) ** e
                new[idx] = 0
        if c == 0.0:
            continue
        key = tuple(new)
        terms[key] = terms.get(key, 0.0) + c
    return Polynomial(p.space, terms)


def substitute_linear(p: Polynomial, index: int, replacement: Polynomial) -> Polynomial:
    """Replace variable `index` by a polynomial (used to fold simplex equalities)."""
    if not 0 <= index < p.space.dim:
        raise IndexError(f"variable index {index} out of range")
    result = Polynomial.zero(p.space)
    for exps, coeff in p.terms.items():
        e = exps[index]
        new = list(exps)
        new[index] = 0
        term = Polynomial(p.space, {tuple(new): coeff})
        for _ in range(e):
            term = mul(term, replacement)
        result = result + term
    return result


def monomial_basis(dim: int, max_degree: int, active: Sequence[int] | None = None) -> List[Exponents]:
    """All exponent tuples of total degree <= max_degree, graded-lex order.

    `active` restricts to a subset of variable indices (others fixed at
    exponent 0); the tuples still have length `dim`.
    """
    if max_degree < 0:
        raise ValueError("max_degree must be nonnegative")
    idxs = list(range(dim)) if active is None else sorted(active)
    out: List[Exponents] = []
    for deg in range(max_degree + 1):
        level = set()
        for combo in combinations_with_replacement(idxs, deg):
            exps = [0] * dim
            for i in combo:
                exps[i] += 1
            level.add(tuple(exps))
        out.extend(sorted(level, reverse=True))
    return out


def basis_size(dim: int, max_degree: int) -> int:
    return math.comb(dim + max_degree, max_degree)


# -- text round-trip ---------------------------------------------------------

def poly_to_text(p: Polynomial) -> str:
    """`coeff*x1^e1*...*xn^en` terms joined by `+`; zero polynomial is `0`."""
    if p.is_zero:
        return "0"
    parts = []
    for exps, coeff in p.sorted_terms():
        factors = [repr(coeff)]
        for name, e in zip(p.space.names, exps):
            if e:
                factors.append(f"{name}^{e}")
        parts.append("*".join(factors))
    return " + ".join(parts)


def poly_from_text(space: VarSpace, text: str) -> Polynomial:
    text = text.strip()
    if text == "0":
        return Polynomial.zero(space)
    terms: Dict[Exponents, float] = {}
    for part in text.split("+"):
        factors = part.strip().split("*")
        coeff = float(factors[0])
        exps = [0] * space.dim
        for factor in factors[1:]:
            name, e = factor.split("^")
            exps[space.index(name)] += int(e)
        key = tuple(exps)
        terms[key] = terms.get(key, 0.0) + coeff
    return Polynomial(space, terms)


# -- batched evaluation ------------------------------------------------------

class StackedPolyEval:
    """Evaluate a stack of polynomials over a shared space at one point, fast.

    Used by the MPC planner and metric loops where per-call dict iteration
    would dominate the runtime.  Evaluation order differs from eval_poly but
    agrees to floating-point roundoff.
    """

    def __init__(self, polys: Sequence[Polynomial]):
        if not polys:
            raise ValueError("need at least one polynomial")
        space = polys[0].space
        for p in polys:
            if p.space != space:
                raise DimensionMismatch("stacked polynomials must share a space")
        self.space = space
        self.n_out = len(polys)
        exps_set = sorted({e for p in polys for e in p.terms})
        if not exps_set:
            exps_set = [(0,) * space.dim]
        self.exps = np.array(exps_set, dtype=np.int64)          # (T, dim)
        self.max_deg = int(self.exps.max()) if self.exps.size else 0
        coeffs = np.zeros((len(polys), len(exps_set)))
        index = {e: j for j, e in enumerate(exps_set)}
        for i, p in enumerate(polys):
            for e, c in p.terms.items():
                coeffs[i, index[e]] = c
        self.coeffs = coeffs

    def _monomials(self, point: np.ndarray) -> np.ndarray:
        # powers[v, d] = point[v] ** d, then product across variables per term
        powers = np.ones((self.space.dim, self.max_deg + 1))
        for d in range(1, self.max_deg + 1):
            powers[:, d] = powers[:, d - 1] * point
        cols = powers[np.arange(self.space.dim)[None, :], self.exps]
        return np.prod(cols, axis=1)

    def __call__(self, point: np.ndarray) -> np.ndarray:
        point = np.asarray(point, dtype=float)
        if point.shape != (self.space.dim,):
            raise DimensionMismatch("point has wrong dimension")
        return self.coeffs @ self._monomials(point)

    def eval_many(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at each row of `points`; returns (n_points, n_out)."""
        points = np.asarray(points, dtype=float)
        vals = np.ones((points.shape[0], self.exps.shape[0]))
        for v in range(self.space.dim):
            col = self.exps[:, v]
            mask = col > 0
            if mask.any():
                vals[:, mask] *= points[:, [v]] ** col[mask]
        return vals @ self.coeffs.T
