"""Side-information assisted regression for controlled game dynamics.

Fits one polynomial per strategy coordinate to scarce (x, omega, xdot)
samples by least squares, subject to certified side information:

- tangency: per player the coordinate polynomials sum to zero identically,
- forward invariance: on each simplex face x_{i,a} = 0 the corresponding
  coordinate polynomial is nonnegative,
- positive correlation: the inner product of the utility gradient with the
  fitted field is nonnegative on the whole state-control domain.

Face and whole-domain constraints are posed after substituting the simplex
equalities (the last coordinate of each player is one minus the others), so
every certificate lives over a box-shaped product of triangles and control
intervals described purely by degree-one inequalities.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import sdp, sos
from .dynamics import VectorField
from .game import Game, utility_gradient_sym
from .poly import (Polynomial, StackedPolyEval, VarSpace, eval_poly,
                   poly_to_text)


class SiarcError(ValueError):
    pass


@dataclass
class SiarcConfig:
    degree: int = 7                    # certificate degree for PC constraints
    face_degree: Optional[int] = None  # certificate degree for face constraints
    rfi: bool = True
    pc: bool = True
    model_degree_x: int = 3
    model_degree_w: int = 1
    model_total_degree: int = 4
    prune_tol: float = 1e-8
    slack: float = 0.0                 # delta-satisfiability slack added to each side constraint
    pc_omega_free: bool = True         # certify PC for all controls, not just the box
    backend: str = "ipm"               # "ipm" (high accuracy) or "admm"
    restart_rounds: int = 6            # warm-restart rounds after the main ipm solve
    restart_iters: int = 10            # ipm iterations per restart round
    polish: bool = True                # alternating-projection polish after solve
    solver: sdp.SolveOptions = field(default_factory=sdp.SolveOptions)
    ipm: sdp.IpmOptions = field(default_factory=sdp.IpmOptions)

    def __post_init__(self):
        if self.degree < self.model_total_degree:
            raise SiarcError("certificate degree below model degree")

    @property
    def face_d(self) -> int:
        return self.face_degree if self.face_degree is not None else self.degree


@dataclass
class DynamicsModel:
    game: Game
    space: VarSpace
    polys: List[Polynomial]            # one per flat strategy coordinate
    degree: int
    status: str = "Solved"
    training_mse: float = float("nan")
    certificate: Optional[sos.Certificate] = None
    solve_seconds: float = 0.0

    def as_field(self) -> VectorField:
        ev = StackedPolyEval(self.polys)
        n_x = self.game.n_states

        def f(x_flat: np.ndarray, omega: np.ndarray) -> np.ndarray:
            return ev(np.concatenate([x_flat, omega]))

        return VectorField(self.game, f, symbolic=self.polys, name="siarc_model")

    def dump(self, path: str):
        with open(path, "w") as fh:
            fh.write(f"model degree {self.degree}\n")
            fh.write(f"status {self.status}\n")
            fh.write(f"training mse {self.training_mse!r}\n")
            if self.certificate is not None:
                fh.write(f"certificate delta {self.certificate.delta_achieved!r}\n")
            for name, p in zip(self._coord_names(), self.polys):
                fh.write(f"{name}: {poly_to_text(p)}\n")

    def _coord_names(self) -> List[str]:
        names = []
        for i, m in enumerate(self.game.action_counts):
            names.extend(f"p_{i + 1}_{a + 1}" for a in range(m))
        return names


# -- template and domain construction ---------------------------------------------

def model_basis(game: Game, cfg: SiarcConfig) -> List[Tuple[int, ...]]:
    """Monomials of the model template in the joint (x, omega) space."""
    space = game.joint_space()
    n_x = game.n_states
    from .poly import monomial_basis
    out = []
    for e in monomial_basis(space.dim, cfg.model_total_degree):
        if sum(e[:n_x]) <= cfg.model_degree_x and sum(e[n_x:]) <= cfg.model_degree_w:
            out.append(e)
    return out


def _control_inequalities(game: Game, space: VarSpace) -> List[Polynomial]:
    n_x = game.n_states
    gs = []
    for k in range(game.n_controls):
        lo, hi = game.control_bounds[k]
        e = [0] * space.dim
        e[n_x + k] = 1
        e = tuple(e)
        gs.append(Polynomial(space, {e: 1.0, (0,) * space.dim: -lo}))
        gs.append(Polynomial(space, {e: -1.0, (0,) * space.dim: hi}))
    return gs


def _simplex_substitutions(game: Game, space: VarSpace,
                           fixed: Dict[int, float]) -> Tuple[Dict[int, float],
                                                             Dict[int, Polynomial],
                                                             List[Polynomial]]:
    """Eliminate one coordinate per player (the last free one) via the simplex
    equality, treating `fixed` coordinates (faces) as the given constants.

    Returns (numeric assignments, linear substitutions, inequality list over
    the surviving coordinates)."""
    offs = game.state_offsets()
    numeric = dict(fixed)
    linear: Dict[int, Polynomial] = {}
    gs: List[Polynomial] = []
    one = (0,) * space.dim
    for i in range(game.n_players):
        idxs = list(range(offs[i], offs[i + 1]))
        free = [j for j in idxs if j not in fixed]
        if not free:
            raise SiarcError("all coordinates of a player fixed")
        budget = 1.0 - sum(fixed.get(j, 0.0) for j in idxs if j in fixed)
        keep, elim = free[:-1], free[-1]
        if not keep:
            numeric[elim] = budget
            continue
        terms = {one: budget}
        for j in keep:
            e = [0] * space.dim
            e[j] = 1
            terms[tuple(e)] = -1.0
        linear[elim] = Polynomial(space, terms)
        for j in keep:
            e = [0] * space.dim
            e[j] = 1
            gs.append(Polynomial(space, {tuple(e): 1.0}))
        gs.append(Polynomial(space, dict(terms)))  # eliminated coord >= 0
    return numeric, linear, gs


def _reduce(expr: sos.AffinePoly, numeric: Dict[int, float],
            linear: Dict[int, Polynomial]) -> sos.AffinePoly:
    out = expr.substitute(numeric) if numeric else expr
    for idx, rep in linear.items():
        out = out.substitute_linear(idx, rep)
    return out


# -- problem assembly ----------------------------------------------------------------

def build_problem(dataset, game: Game, cfg: SiarcConfig
                  ) -> Tuple[sos.SosProgram, List[sos.AffinePoly]]:
    if len(dataset) == 0:
        raise SiarcError("empty dataset")
    space = game.joint_space()
    n_x = game.n_states
    offs = game.state_offsets()
    basis = model_basis(game, cfg)
    prog = sos.SosProgram(space)
    templates = [prog.declare_poly_on_basis(basis) for _ in range(n_x)]

    if cfg.rfi:
        for i in range(game.n_players):
            total = templates[offs[i]]
            for j in range(offs[i] + 1, offs[i + 1]):
                total = total + templates[j]
            prog.add_poly_identity(total)

        controls = _control_inequalities(game, space)
        for i in range(game.n_players):
            for a in range(game.action_counts[i]):
                coord = offs[i] + a
                numeric, linear, gs = _simplex_substitutions(
                    game, space, {coord: 0.0})
                expr = _reduce(templates[coord], numeric, linear)
                expr = _add_slack(expr, cfg.slack)
                dom = sos.SemialgebraicSet(space, inequalities=gs + controls)
                prog.add_nonneg_on(expr, dom, cfg.face_d)

    if cfg.pc:
        # The PC product is certified with simplex multipliers only, i.e. over
        # the whole control space.  The certificate of the true field needs no
        # control-bound multipliers (its simplex multipliers are squares), and
        # dropping them keeps the Gram blocks small while implying
        # nonnegativity on the bounded control box a fortiori.
        controls = ([] if cfg.pc_omega_free
                    else _control_inequalities(game, space))
        numeric, linear, gs = _simplex_substitutions(game, space, {})
        for i in range(game.n_players):
            vs = utility_gradient_sym(game, i, space)
            total = None
            for a, v in enumerate(vs):
                term = templates[offs[i] + a].mul_poly(v)
                total = term if total is None else total + term
            if total.total_degree() > cfg.degree:
                raise SiarcError("certificate degree too small for the PC product")
            expr = _reduce(total, numeric, linear)
            expr = _add_slack(expr, cfg.slack)
            dom = sos.SemialgebraicSet(space, inequalities=gs + controls)
            prog.add_nonneg_on(expr, dom, cfg.degree)

    for k in range(len(dataset)):
        point = np.concatenate([dataset.states[k], dataset.controls[k]])
        for c in range(n_x):
            prog.add_residual(templates[c].eval_lincoeff(point),
                              float(dataset.velocities[k][c]))
    return prog, templates


def fit(dataset, game: Game, cfg: Optional[SiarcConfig] = None) -> DynamicsModel:
    cfg = cfg or SiarcConfig()
    prog, templates = build_problem(dataset, game, cfg)
    prob = prog.compile()
    t0 = time.time()
    if cfg.backend == "ipm":
        sol = sdp.solve_ipm(prob, cfg.ipm)
        # Warm-restart chaining: re-center from the best iterate and take a
        # short burst of interior-point steps.  Each round shrinks the
        # residual floor the singular optimum leaves behind; stop as soon as
        # a round fails to improve.
        slices = prob.block_slices()
        for _ in range(cfg.restart_rounds):
            if max(sol.residuals) <= cfg.ipm.tol:
                break
            S0 = [sdp.smat(np.asarray(sol.dual_slack)[sl], k)
                  for k, sl in zip(prob.blocks, slices)]
            # The restarts live in the ill-conditioned endgame on purpose;
            # accept-if-improving below is the safeguard, not direction
            # accuracy.
            ro = replace(cfg.ipm, max_iters=cfg.restart_iters,
                         dir_tol=math.inf)
            nxt = sdp.solve_ipm(prob, ro,
                                init=(sol.blocks, sol.free, S0, sol.dual))
            if max(nxt.residuals) >= max(sol.residuals):
                break
            sol = nxt
    else:
        sol = sdp.solve(prob, cfg.solver)
    if cfg.polish:
        sol = prog.polish(prob, sol)
    elapsed = time.time() - t0
    coeffs, cert = prog.extract(sol)
    polys = [_prune(t.instantiate(coeffs), cfg.prune_tol) for t in templates]
    if cfg.rfi:
        polys = _exact_tangency(game, polys)
    model = DynamicsModel(game=game, space=game.joint_space(), polys=polys,
                          degree=cfg.model_total_degree, status=sol.status,
                          certificate=cert, solve_seconds=elapsed)
    model.training_mse = _training_mse(model, dataset)
    return model


def _add_slack(expr: sos.AffinePoly, slack: float) -> sos.AffinePoly:
    """Certify expr + slack >= 0 instead of expr >= 0 (delta-satisfiability).

    The exact side constraints are active on whole varieties, which leaves the
    certificate SDP without a strictly feasible point and caps the accuracy of
    any numerical solver.  A tiny constant slack restores an interior.
    """
    if slack == 0.0:
        return expr
    one = Polynomial.constant(expr.space, slack)
    return expr + sos.AffinePoly.from_poly(one)


def _prune(p: Polynomial, tol: float) -> Polynomial:
    return Polynomial(p.space, {e: c for e, c in p.terms.items() if abs(c) >= tol})


def _exact_tangency(game: Game, polys: List[Polynomial]) -> List[Polynomial]:
    """Rewrite each player's last coordinate as minus the sum of the others so
    the per-player coefficient sums are exactly zero."""
    offs = game.state_offsets()
    out = list(polys)
    for i in range(game.n_players):
        last = offs[i + 1] - 1
        acc = Polynomial.zero(polys[0].space)
        for j in range(offs[i], last):
            acc = acc - out[j]
        out[last] = acc
    return out


def _training_mse(model: DynamicsModel, dataset) -> float:
    ev = StackedPolyEval(model.polys)
    pts = np.hstack([dataset.states, dataset.controls])
    pred = ev.eval_many(pts)
    return float(np.mean((pred - dataset.velocities) ** 2))


# -- evaluation ------------------------------------------------------------------------

def sample_joint(game: Game, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples of the state simplices crossed with the control box."""
    cols = []
    for m in game.action_counts:
        cols.append(rng.dirichlet(np.ones(m), size=n))
    lo, hi = game.control_bounds[:, 0], game.control_bounds[:, 1]
    cols.append(rng.uniform(lo, hi, size=(n, game.n_controls)))
    return np.hstack(cols)


def model_mse_true(model: DynamicsModel, field: VectorField,
                   n_samples: int = 200,
                   rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Per-coordinate mean squared velocity error over uniform (x, omega)."""
    rng = rng or np.random.default_rng(0)
    game = model.game
    pts = sample_joint(game, n_samples, rng)
    n_x = game.n_states
    ev = StackedPolyEval(model.polys)
    pred = ev.eval_many(pts)
    true = np.array([field(p[:n_x], p[n_x:]) for p in pts])
    return np.mean((pred - true) ** 2, axis=0)
