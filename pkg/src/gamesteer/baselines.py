"""Comparison identifiers: SINDYc and a small physics-informed network.

SINDYc runs sequential thresholded least squares over a monomial library in
(x, omega) and returns a polynomial model in the same format the certified
fit produces.  The PINN is the minimal two-hidden-layer tanh network on the
reduced state coordinates (one dropped coordinate per player), trained by
full-batch gradient descent on a supervised velocity loss plus hinge
penalties for forward invariance on the simplex faces and for positive
correlation with the utility gradient.  Both models expose as_field(), so the
controller and the benchmark treat all three identifiers interchangeably.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dynamics import TrajectoryDataset, VectorField
from .game import Game, utility_gradient_sym
from .poly import (Polynomial, StackedPolyEval, VarSpace, eval_poly,
                   monomial_basis)
from .siarc import DynamicsModel, _training_mse


class BaselineError(ValueError):
    pass


# -- SINDYc ---------------------------------------------------------------------------

@dataclass
class SindyConfig:
    degree: int = 4            # library max total degree in (x, omega)
    threshold: float = 1e-3    # sparsification cutoff on coefficients
    max_iters: int = 20

    def __post_init__(self):
        if self.threshold < 0:
            raise BaselineError("threshold must be nonnegative")


def _library(dim: int, degree: int) -> List[Tuple[int, ...]]:
    return monomial_basis(dim, degree)


def _eval_library(basis: Sequence[Tuple[int, ...]], pts: np.ndarray) -> np.ndarray:
    cols = np.empty((len(pts), len(basis)))
    for j, e in enumerate(basis):
        col = np.ones(len(pts))
        for k, p in enumerate(e):
            if p:
                col = col * pts[:, k] ** p
        cols[:, j] = col
    return cols


def sindy_fit(dataset: TrajectoryDataset, game: Optional[Game] = None,
              cfg: Optional[SindyConfig] = None) -> DynamicsModel:
    """Sequential thresholded least squares, independently per output.

    With threshold zero this is plain least squares (minimum-norm when the
    library is underdetermined).  Each sparsification pass zeroes every
    coefficient below the threshold and refits on the surviving support,
    stopping at a fixpoint or the iteration cap; the support can only shrink.
    """
    cfg = cfg or SindyConfig()
    if len(dataset) == 0:
        raise BaselineError("empty dataset")
    pts = np.hstack([dataset.states, dataset.controls])
    dim = pts.shape[1]
    n_out = dataset.velocities.shape[1]
    if game is not None:
        space = game.joint_space()
    else:
        n_w = dataset.controls.shape[1]
        names = tuple(f"x{j + 1}" for j in range(dim - n_w)) \
            + tuple(f"w{k + 1}" for k in range(n_w))
        space = VarSpace(names)
    basis = _library(dim, cfg.degree)
    Phi = _eval_library(basis, pts)

    rank_deficient = False
    polys = []
    for c in range(n_out):
        y = dataset.velocities[:, c]
        coef, _, rank, _ = np.linalg.lstsq(Phi, y, rcond=None)
        if rank < Phi.shape[1]:
            rank_deficient = True
        for _ in range(cfg.max_iters):
            keep = np.abs(coef) >= cfg.threshold
            if cfg.threshold == 0.0 or keep.all():
                break
            new_coef = np.zeros_like(coef)
            if keep.any():
                sub, _, rank, _ = np.linalg.lstsq(Phi[:, keep], y, rcond=None)
                if rank < int(keep.sum()):
                    rank_deficient = True
                new_coef[keep] = sub
            if np.array_equal(new_coef != 0.0, coef != 0.0) \
                    and np.allclose(new_coef, coef):
                coef = new_coef
                break
            coef = new_coef
        polys.append(Polynomial(space, {e: float(v) for e, v in zip(basis, coef)
                                        if v != 0.0}))

    status = "Sindy" + (" (rank-deficient refit)" if rank_deficient else "")
    model = DynamicsModel(game, space, polys, cfg.degree, status=status)
    model.training_mse = _training_mse(model, dataset)
    return model


# -- PINN -----------------------------------------------------------------------------

@dataclass
class PinnLossWeights:
    lam0: float = 1.0
    lam_rfi: float = 1.0
    lam_pc: float = 1.0
    n_face: int = 500       # collocation points per face set
    n_pc: int = 500         # interior collocation points for the PC hinge

    def __post_init__(self):
        if min(self.lam0, self.lam_rfi, self.lam_pc) < 0:
            raise BaselineError("loss weights must be nonnegative")


def _reduced_index(game: Game) -> List[int]:
    """Flat indices of the kept coordinates (all but each player's last)."""
    offs = game.state_offsets()
    keep = []
    for i in range(game.n_players):
        keep.extend(range(offs[i], offs[i + 1] - 1))
    return keep


class PinnModel:
    """in -> 5 -> 5 -> out tanh network over (reduced state, controls)."""

    def __init__(self, game: Game, params: List[np.ndarray]):
        self.game = game
        self.params = params                 # [W1, b1, W2, b2, W3, b3]
        self.keep = _reduced_index(game)
        self.status = "Pinn"
        self.training_mse = float("nan")
        if not all(np.all(np.isfinite(p)) for p in params):
            raise BaselineError("non-finite network parameters")

    @staticmethod
    def init(game: Game, rng: np.random.Generator, width: int = 5) -> "PinnModel":
        n_in = len(_reduced_index(game)) + game.n_controls
        n_out = len(_reduced_index(game))
        sizes = [(width, n_in), (width,), (width, width), (width,),
                 (n_out, width), (n_out,)]
        params = [rng.normal(0.0, 0.5, size=s) for s in sizes]
        return PinnModel(game, params)

    def forward(self, Z: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Z is (n_in, N); returns hidden activations and the output."""
        W1, b1, W2, b2, W3, b3 = self.params
        a1 = np.tanh(W1 @ Z + b1[:, None])
        a2 = np.tanh(W2 @ a1 + b2[:, None])
        out = W3 @ a2 + b3[:, None]
        return a1, a2, out

    def backward(self, Z: np.ndarray, a1: np.ndarray, a2: np.ndarray,
                 d_out: np.ndarray) -> List[np.ndarray]:
        """Gradients of sum(loss) given d loss / d out, shape (n_out, N)."""
        W1, b1, W2, b2, W3, b3 = self.params
        gW3 = d_out @ a2.T
        gb3 = d_out.sum(axis=1)
        d2 = (W3.T @ d_out) * (1.0 - a2 ** 2)
        gW2 = d2 @ a1.T
        gb2 = d2.sum(axis=1)
        d1 = (W2.T @ d2) * (1.0 - a1 ** 2)
        gW1 = d1 @ Z.T
        gb1 = d1.sum(axis=1)
        return [gW1, gb1, gW2, gb2, gW3, gb3]

    def reduced_input(self, x_flat: np.ndarray, omega: np.ndarray) -> np.ndarray:
        return np.concatenate([np.asarray(x_flat, dtype=float)[self.keep],
                               np.asarray(omega, dtype=float)])

    def as_field(self) -> VectorField:
        game = self.game
        offs = game.state_offsets()
        keep = self.keep

        def f(x_flat: np.ndarray, omega: np.ndarray) -> np.ndarray:
            z = self.reduced_input(x_flat, omega)[:, None]
            _, _, out = self.forward(z)
            red = out[:, 0]
            full = np.zeros(game.n_states)
            full[keep] = red
            # tangency completion: the dropped coordinate moves opposite to
            # the kept ones
            for i in range(game.n_players):
                full[offs[i + 1] - 1] = -np.sum(full[offs[i]:offs[i + 1] - 1])
            return full

        return VectorField(game, f, name="pinn_model")

    def dump(self, path: str):
        with open(path, "w") as fh:
            fh.write(f"status {self.status}\n")
            fh.write(f"training mse {self.training_mse!r}\n")
            for name, p in zip(("W1", "b1", "W2", "b2", "W3", "b3"), self.params):
                fh.write(f"{name} shape {p.shape}\n")
                for row in np.atleast_2d(p):
                    fh.write("  " + " ".join(repr(v) for v in row) + "\n")


def _face_sets(game: Game, keep: List[int], n_face: int, n_pc: int,
               rng: np.random.Generator):
    """Collocation inputs for the hinge penalties.

    Face sets pair an input batch with a fixed linear functional c of the
    network output: the penalty is max(0, c . p).  Coordinate faces x = 0
    need p >= 0 (c = -e_j); the face where a player's kept coordinates sum to
    one is the dropped coordinate's zero face and needs the summed velocity
    <= 0 (c = +sum of that player's output coordinates).
    """
    offs = game.state_offsets()
    n_red = len(keep)
    lo, hi = game.control_bounds[:, 0], game.control_bounds[:, 1]

    def interior(n):
        cols = []
        for i in range(game.n_players):
            m = game.action_counts[i]
            cols.append(rng.dirichlet(np.ones(m), size=n)[:, :m - 1])
        cols.append(rng.uniform(lo, hi, size=(n, game.n_controls)))
        return np.hstack(cols).T          # (n_in, n)

    player_of = []
    for i in range(game.n_players):
        player_of.extend([i] * (game.action_counts[i] - 1))

    faces = []
    for j in range(n_red):
        Z = interior(n_face)
        # zeroing one kept coordinate keeps the player's block inside the
        # reduced sub-simplex, so this lands uniformly on the face x_j = 0
        Z[j, :] = 0.0
        c = np.zeros(n_red)
        c[j] = -1.0
        faces.append((Z, c))
    for i in range(game.n_players):
        Z = interior(n_face)
        cols = [j for j in range(n_red) if player_of[j] == i]
        block = Z[cols, :]
        s = block.sum(axis=0)
        s[s <= 1e-12] = 1.0
        Z[cols, :] = block / s            # push onto the sum-to-one face
        c = np.zeros(n_red)
        c[cols] = 1.0
        faces.append((Z, c))

    pc_Z = interior(n_pc)
    return faces, pc_Z


def _pc_coeffs(game: Game, keep: List[int], Zpc: np.ndarray) -> np.ndarray:
    """Per-sample gradient of each player's utility in reduced coordinates.

    Row j holds d u_{player(j)} / d x_j evaluated at the sample, which for a
    kept coordinate is v_{i,a} minus v of the player's dropped action.  The
    positive-correlation penalty is then max(0, -sum_j G[j, s] p_j).
    """
    offs = game.state_offsets()
    n_red = len(keep)
    space = game.joint_space()
    # lift the reduced samples back to full coordinates for evaluation
    full = np.zeros((space.dim, Zpc.shape[1]))
    for j, idx in enumerate(keep):
        full[idx, :] = Zpc[j, :]
    for i in range(game.n_players):
        kept = full[offs[i]:offs[i + 1] - 1, :]
        full[offs[i + 1] - 1, :] = 1.0 - kept.sum(axis=0)
    full[game.n_states:, :] = Zpc[n_red:, :]

    G = np.zeros((n_red, Zpc.shape[1]))
    j = 0
    for i in range(game.n_players):
        vs = utility_gradient_sym(game, i, space)
        ev = StackedPolyEval(vs)
        vals = ev.eval_many(full.T)       # (N, m_i)
        for a in range(game.action_counts[i] - 1):
            G[j, :] = vals[:, a] - vals[:, -1]
            j += 1
    return G


def pinn_fit(dataset: TrajectoryDataset, game: Game,
             weights: Optional[PinnLossWeights] = None,
             epochs: int = 20_000,
             rng: Optional[np.random.Generator] = None,
             step: float = 1e-2) -> PinnModel:
    """Full-batch gradient descent with hand-derived backpropagation."""
    weights = weights or PinnLossWeights()
    rng = rng or np.random.default_rng(0)
    model = PinnModel.init(game, rng)
    keep = model.keep

    Zs = np.hstack([dataset.states[:, keep], dataset.controls]).T
    Y = dataset.velocities[:, keep].T
    faces, Zpc = _face_sets(game, keep, weights.n_face, weights.n_pc, rng)
    Gpc = _pc_coeffs(game, keep, Zpc)

    n_sup = Zs.shape[1]
    n_pc = Zpc.shape[1]
    for epoch in range(epochs):
        grads = [np.zeros_like(p) for p in model.params]
        loss = 0.0
        # supervised velocity loss
        a1, a2, out = model.forward(Zs)
        diff = out - Y
        loss += weights.lam0 * float(np.sum(diff ** 2)) / n_sup
        d_out = (2.0 * weights.lam0 / n_sup) * diff
        for g, gn in zip(grads, model.backward(Zs, a1, a2, d_out)):
            g += gn
        # forward-invariance hinges on the simplex faces
        if weights.lam_rfi > 0:
            for Z, c in faces:
                a1, a2, out = model.forward(Z)
                val = c @ out
                act = val > 0.0
                loss += weights.lam_rfi * float(val[act].sum()) / Z.shape[1]
                d_out = (weights.lam_rfi / Z.shape[1]) * np.outer(c, act)
                for g, gn in zip(grads, model.backward(Z, a1, a2, d_out)):
                    g += gn
        # positive-correlation hinge on interior collocation
        if weights.lam_pc > 0:
            a1, a2, out = model.forward(Zpc)
            val = -np.sum(Gpc * out, axis=0)
            act = val > 0.0
            loss += weights.lam_pc * float(val[act].sum()) / n_pc
            d_out = -(weights.lam_pc / n_pc) * Gpc * act
            for g, gn in zip(grads, model.backward(Zpc, a1, a2, d_out)):
                g += gn
        if not np.isfinite(loss):
            raise BaselineError(f"pinn training diverged at epoch {epoch}: "
                                f"loss {loss!r}, step {step!r}")
        for p, g in zip(model.params, grads):
            p -= step * g

    _, _, out = model.forward(Zs)
    model.training_mse = float(np.mean((out - Y) ** 2))
    return model


def pinn_loss(model: PinnModel, dataset: TrajectoryDataset,
              weights: PinnLossWeights, faces, Zpc, Gpc) -> float:
    """Total loss at the current parameters (used by tests and diagnostics)."""
    keep = model.keep
    Zs = np.hstack([dataset.states[:, keep], dataset.controls]).T
    Y = dataset.velocities[:, keep].T
    _, _, out = model.forward(Zs)
    loss = weights.lam0 * float(np.sum((out - Y) ** 2)) / Zs.shape[1]
    for Z, c in faces:
        _, _, out = model.forward(Z)
        val = c @ out
        loss += weights.lam_rfi * float(val[val > 0].sum()) / Z.shape[1]
    _, _, out = model.forward(Zpc)
    val = -np.sum(Gpc * out, axis=0)
    loss += weights.lam_pc * float(val[val > 0].sum()) / Zpc.shape[1]
    return loss


def model_eval(model, x_flat: Sequence[float], omega: Sequence[float]) -> np.ndarray:
    """Uniform velocity evaluation across SIARc, SINDYc and PINN models."""
    return model.as_field()(np.asarray(x_flat, dtype=float),
                            np.asarray(omega, dtype=float))
