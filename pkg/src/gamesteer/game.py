"""Control-parameterized normal-form games.

A game couples per-player base payoff tensors over joint actions with a
tying structure that maps selected payoff entries to shared bounded control
variables.  Payoff perturbations enter additively: the realized payoff of
player i at joint action a is base_i[a] + sign * omega[k] when entry (i, a)
is tied to control k, and just base_i[a] when the entry is fixed to zero.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .poly import Polynomial, VarSpace


class GameError(ValueError):
    pass


JointAction = Tuple[int, ...]


@dataclass(frozen=True)
class Game:
    """Two core pieces of data: base payoffs and the control tying map.

    control_map[(i, a)] = (k, sign) ties player i's payoff perturbation at
    joint action a (0-based indices) to sign * omega_k.  Entries absent from
    the map are fixed to zero.
    """

    action_counts: Tuple[int, ...]
    base_payoff: Tuple[np.ndarray, ...]
    control_map: Dict[Tuple[int, JointAction], Tuple[int, float]]
    control_bounds: np.ndarray  # (q, 2)
    name: str = "game"

    def __post_init__(self):
        for u in self.base_payoff:
            if u.shape != self.action_counts:
                raise GameError("payoff tensor shape does not match action counts")
            if not np.all(np.isfinite(u)):
                raise GameError("payoff tensor has non-finite entries")
        bounds = np.asarray(self.control_bounds, dtype=float)
        if bounds.size and (bounds.ndim != 2 or bounds.shape[1] != 2):
            raise GameError("control_bounds must be (q, 2)")
        if bounds.size and np.any(bounds[:, 0] > bounds[:, 1]):
            raise GameError("control lower bound exceeds upper bound")
        referenced = {k for k, _ in self.control_map.values()}
        if referenced != set(range(len(bounds))):
            raise GameError("every control variable must be referenced")

    @property
    def n_players(self) -> int:
        return len(self.action_counts)

    @property
    def n_controls(self) -> int:
        return len(self.control_bounds)

    @property
    def n_states(self) -> int:
        return sum(self.action_counts)

    def payoff(self, i: int, a: JointAction, omega: Sequence[float]) -> float:
        val = float(self.base_payoff[i][a])
        tie = self.control_map.get((i, tuple(a)))
        if tie is not None:
            k, sign = tie
            val += sign * float(omega[k])
        return val

    def state_offsets(self) -> List[int]:
        offs = [0]
        for m in self.action_counts:
            offs.append(offs[-1] + m)
        return offs

    def joint_space(self) -> VarSpace:
        """Variable space over all strategy coordinates followed by controls."""
        names = []
        for i, m in enumerate(self.action_counts):
            names.extend(f"x{i + 1}_{a + 1}" for a in range(m))
        names.extend(f"w{k + 1}" for k in range(self.n_controls))
        return VarSpace(tuple(names))


@dataclass(frozen=True)
class StrategyProfile:
    strategies: Tuple[np.ndarray, ...]

    def __post_init__(self):
        for x in self.strategies:
            if np.any(x < -1e-9) or abs(float(np.sum(x)) - 1.0) > 1e-9:
                raise GameError(f"not a probability vector: {x}")

    @staticmethod
    def from_flat(game: Game, flat: Sequence[float]) -> "StrategyProfile":
        flat = np.asarray(flat, dtype=float)
        offs = game.state_offsets()
        return StrategyProfile(tuple(flat[offs[i]:offs[i + 1]].copy()
                                     for i in range(game.n_players)))

    def flat(self) -> np.ndarray:
        return np.concatenate(self.strategies)


@dataclass(frozen=True)
class ControlSignal:
    values: np.ndarray

    @staticmethod
    def checked(game: Game, values: Sequence[float]) -> "ControlSignal":
        values = np.asarray(values, dtype=float)
        lo, hi = game.control_bounds[:, 0], game.control_bounds[:, 1]
        if np.any(values < lo - 1e-12) or np.any(values > hi + 1e-12):
            raise GameError("control signal out of bounds")
        return ControlSignal(values)


# -- named instances ------------------------------------------------------------

def _pair_ties(free_joints: List[JointAction], signs=(1.0, -1.0)
               ) -> Dict[Tuple[int, JointAction], Tuple[int, float]]:
    cmap = {}
    for k, a in enumerate(free_joints):
        cmap[(0, a)] = (k, signs[0])
        cmap[(1, a)] = (k, signs[1])
    return cmap


def make_stag_hunt() -> Game:
    A = np.array([[4.0, 1.0], [3.0, 3.0]])
    # symmetric game: player 2's payoff at joint (a1, a2) is A[a2, a1]
    cmap = _pair_ties([(0, 0), (0, 1), (1, 0)], signs=(1.0, 1.0))
    return Game(action_counts=(2, 2),
                base_payoff=(A, A.T.copy()),
                control_map=cmap,
                control_bounds=np.array([[0.0, 2.0]] * 3),
                name="stag_hunt")


def make_matching_pennies() -> Game:
    A = np.array([[1.0, -1.0], [-1.0, 1.0]])
    # shared controls with opposite signs keep the game zero-sum at every omega
    cmap = _pair_ties([(0, 0), (0, 1), (1, 0)], signs=(1.0, -1.0))
    return Game(action_counts=(2, 2),
                base_payoff=(A, -A),
                control_map=cmap,
                control_bounds=np.array([[0.0, 1.0]] * 3),
                name="matching_pennies")


def make_rps(eps: float) -> Game:
    A = np.array([[eps, -1.0, 1.0],
                  [1.0, eps, -1.0],
                  [-1.0, 1.0, eps]])
    cmap = _pair_ties([(0, 1), (0, 2), (1, 0), (2, 0)], signs=(1.0, -1.0))
    return Game(action_counts=(3, 3),
                base_payoff=(A, -A),
                control_map=cmap,
                control_bounds=np.array([[-1.0, 1.0]] * 4),
                name=f"rps_{eps}")


# -- expected utilities ----------------------------------------------------------

def utility(game: Game, i: int, x: StrategyProfile, omega: Sequence[float]) -> float:
    total = 0.0
    for a in itertools.product(*(range(m) for m in game.action_counts)):
        prob = 1.0
        for j, aj in enumerate(a):
            prob *= float(x.strategies[j][aj])
        if prob:
            total += prob * game.payoff(i, a, omega)
    return total


def utility_gradient(game: Game, i: int, x: StrategyProfile,
                     omega: Sequence[float]) -> np.ndarray:
    """Component a is u_i(a, x_{-i}, omega): the payoff of pure action a."""
    grad = np.zeros(game.action_counts[i])
    for a in itertools.product(*(range(m) for m in game.action_counts)):
        prob = 1.0
        for j, aj in enumerate(a):
            if j != i:
                prob *= float(x.strategies[j][aj])
        if prob:
            grad[a[i]] += prob * game.payoff(i, a, omega)
    return grad


def utility_gradient_sym(game: Game, i: int,
                         space: Optional[VarSpace] = None) -> List[Polynomial]:
    """Symbolic v_{i,a}(x, omega) in the game's joint variable space."""
    space = space or game.joint_space()
    offs = game.state_offsets()
    n_x = game.n_states
    dim = space.dim
    polys = []
    for a_i in range(game.action_counts[i]):
        terms: Dict[Tuple[int, ...], float] = {}
        for a in itertools.product(*(range(m) for m in game.action_counts)):
            if a[i] != a_i:
                continue
            base_exp = [0] * dim
            for j, aj in enumerate(a):
                if j != i:
                    base_exp[offs[j] + aj] += 1
            be = tuple(base_exp)
            terms[be] = terms.get(be, 0.0) + float(game.base_payoff[i][a])
            tie = game.control_map.get((i, a))
            if tie is not None:
                k, sign = tie
                we = list(base_exp)
                we[n_x + k] += 1
                we = tuple(we)
                terms[we] = terms.get(we, 0.0) + sign
        polys.append(Polynomial(space, terms))
    return polys


# -- random instances and equilibria ---------------------------------------------

class StagHuntClass:
    """Symmetric 2x2 coordination games with (1,1) socially optimal."""

    @staticmethod
    def accepts(A: np.ndarray) -> bool:
        return bool(A[0, 0] > A[1, 0] and A[1, 1] > A[0, 1] and A[0, 0] > A[1, 1])


class ZeroSum2x2InteriorNE:
    """2x2 zero-sum games whose unique NE is strictly mixed."""

    @staticmethod
    def accepts(A: np.ndarray) -> bool:
        denom = A[0, 0] - A[0, 1] - A[1, 0] + A[1, 1]
        if denom == 0.0:
            return False
        p = (A[1, 1] - A[1, 0]) / denom
        q = (A[1, 1] - A[0, 1]) / denom
        return bool(0.0 < p < 1.0 and 0.0 < q < 1.0)


def random_game(kind, rng: np.random.Generator, max_tries: int = 10000) -> Game:
    """Rejection-sample a payoff matrix from the requested class, entries U[-5, 5]."""
    for _ in range(max_tries):
        A = rng.uniform(-5.0, 5.0, size=(2, 2))
        if not kind.accepts(A):
            continue
        if kind is StagHuntClass:
            template = make_stag_hunt()
            payoffs = (A, A.T.copy())
        elif kind is ZeroSum2x2InteriorNE:
            template = make_matching_pennies()
            payoffs = (A, -A)
        else:
            raise GameError(f"unknown game class {kind!r}")
        return Game(action_counts=template.action_counts,
                    base_payoff=payoffs,
                    control_map=dict(template.control_map),
                    control_bounds=template.control_bounds.copy(),
                    name=f"random_{kind.__name__}")
    raise GameError("rejection cap exceeded")


def interior_ne_2x2(game: Game) -> StrategyProfile:
    """Closed-form indifference equilibrium of a 2x2 zero-sum game."""
    A = game.base_payoff[0]
    if not ZeroSum2x2InteriorNE.accepts(A) or not np.allclose(game.base_payoff[1], -A):
        raise GameError("game has no interior NE of the supported form")
    denom = A[0, 0] - A[0, 1] - A[1, 0] + A[1, 1]
    p = (A[1, 1] - A[1, 0]) / denom  # player 1 plays action 1 w.p. p
    q = (A[1, 1] - A[0, 1]) / denom  # player 2 plays action 1 w.p. q
    return StrategyProfile((np.array([p, 1.0 - p]), np.array([q, 1.0 - q])))
