"""Ground-truth controlled learning dynamics and the data-collection protocol.

Both update policies move each player's mixed strategy along the simplex
tangent (per-player components sum to zero).  The replicator field is
polynomial in (x, omega) and exposes a symbolic form; the log-barrier field
is rational and does not.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .game import Game, StrategyProfile, utility_gradient_sym
from .poly import Polynomial, mul


class DynamicsError(ValueError):
    pass


@dataclass
class VectorField:
    game: Game
    func: Callable[[np.ndarray, np.ndarray], np.ndarray]  # (x_flat, omega) -> xdot
    symbolic: Optional[List[Polynomial]] = None
    name: str = "field"

    def __call__(self, x_flat: np.ndarray, omega: np.ndarray) -> np.ndarray:
        return self.func(np.asarray(x_flat, dtype=float), np.asarray(omega, dtype=float))


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray          # (len(times), n_states)
    controls: np.ndarray        # (len(times), q), control applied from t onward
    renormalizations: int = 0

    def to_csv(self, path: str, game: Game):
        names = []
        for i, m in enumerate(game.action_counts):
            names.extend(f"x_{i + 1}_{a + 1}" for a in range(m))
        header = ["t"] + names + [f"omega_{k + 1}" for k in range(game.n_controls)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t, x, u in zip(self.times, self.states, self.controls):
                w.writerow([repr(t)] + [repr(v) for v in x] + [repr(v) for v in u])


@dataclass
class TrajectoryDataset:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    velocities: np.ndarray
    provenance: Tuple[str, ...]  # per row: "measured" or "finite-difference"

    def __post_init__(self):
        n = len(self.times)
        if not (len(self.states) == len(self.controls) == len(self.velocities)
                == len(self.provenance) == n):
            raise DynamicsError("dataset field lengths differ")

    def __len__(self):
        return len(self.times)


# -- per-player bookkeeping -------------------------------------------------------

def _payoff_tensors(game: Game, omega: np.ndarray) -> List[np.ndarray]:
    out = []
    for i in range(game.n_players):
        u = game.base_payoff[i].copy()
        for (pi, a), (k, sign) in game.control_map.items():
            if pi == i:
                u[a] += sign * omega[k]
        out.append(u)
    return out


def _pure_payoffs(game: Game, i: int, u_i: np.ndarray,
                  strategies: Sequence[np.ndarray]) -> np.ndarray:
    """u_i(a_i, x_{-i}, omega) for every own action a_i, by tensor contraction."""
    v = u_i
    # contract opponents back to front so remaining axis indices stay valid
    for j in range(game.n_players - 1, -1, -1):
        if j != i:
            v = np.tensordot(v, strategies[j], axes=(j, 0))
    return v


def replicator(game: Game) -> VectorField:
    offs = game.state_offsets()

    def f(x_flat: np.ndarray, omega: np.ndarray) -> np.ndarray:
        strategies = [x_flat[offs[i]:offs[i + 1]] for i in range(game.n_players)]
        tensors = _payoff_tensors(game, omega)
        out = np.empty_like(x_flat)
        for i in range(game.n_players):
            v = _pure_payoffs(game, i, tensors[i], strategies)
            ubar = float(strategies[i] @ v)
            out[offs[i]:offs[i + 1]] = strategies[i] * (v - ubar)
        return out

    space = game.joint_space()
    sym = []
    for i in range(game.n_players):
        vs = utility_gradient_sym(game, i, space)
        # u_i(x) = sum_a x_{i,a} v_{i,a}
        ubar = Polynomial.zero(space)
        for a, v in enumerate(vs):
            xa = [0] * space.dim
            xa[offs[i] + a] = 1
            ubar = ubar + mul(Polynomial(space, {tuple(xa): 1.0}), v)
        for a, v in enumerate(vs):
            xa = [0] * space.dim
            xa[offs[i] + a] = 1
            sym.append(mul(Polynomial(space, {tuple(xa): 1.0}), v - ubar))
    return VectorField(game, f, symbolic=sym, name="replicator")


def log_barrier(game: Game) -> VectorField:
    if any(m != 2 for m in game.action_counts):
        raise DynamicsError("log-barrier field implemented for 2-action players")
    offs = game.state_offsets()

    def f(x_flat: np.ndarray, omega: np.ndarray) -> np.ndarray:
        x_flat = np.maximum(x_flat, 1e-12)  # rational form degenerate at vertices
        strategies = [x_flat[offs[i]:offs[i + 1]] for i in range(game.n_players)]
        tensors = _payoff_tensors(game, omega)
        out = np.empty_like(x_flat)
        for i in range(game.n_players):
            v = _pure_payoffs(game, i, tensors[i], strategies)
            sq = strategies[i] ** 2
            wmean = float(sq @ v) / float(np.sum(sq))
            out[offs[i]:offs[i + 1]] = sq * (v - wmean)
        return out

    return VectorField(game, f, symbolic=None, name="log_barrier")


# -- integration ------------------------------------------------------------------

def _renormalize(game: Game, x: np.ndarray) -> Tuple[np.ndarray, bool]:
    offs = game.state_offsets()
    if np.any(x < -1e-6):
        raise DynamicsError(f"state left the simplex: {x}")
    drift = False
    out = x.copy()
    for i in range(game.n_players):
        xi = out[offs[i]:offs[i + 1]]
        if abs(float(np.sum(xi)) - 1.0) > 1e-6:
            raise DynamicsError(f"player {i} mass drifted: {xi}")
        if np.any(xi < 0.0) or abs(float(np.sum(xi)) - 1.0) > 1e-12:
            xi = np.maximum(xi, 0.0)
            xi = xi / np.sum(xi)
            out[offs[i]:offs[i + 1]] = xi
            drift = True
    return out, drift


def integrate(f: VectorField, x0: Sequence[float],
              omega_of_t: Callable[[float], np.ndarray],
              dt: float = 0.01, T: float = 1.0) -> Trajectory:
    """Fixed-step RK4 with simplex renormalization after each step."""
    if dt <= 0:
        raise DynamicsError("dt must be positive")
    game = f.game
    x = np.asarray(x0, dtype=float).copy()
    StrategyProfile.from_flat(game, x)  # validates the start point
    n_steps = int(round(T / dt))
    times = np.empty(n_steps + 1)
    states = np.empty((n_steps + 1, len(x)))
    controls = np.empty((n_steps + 1, game.n_controls))
    renorms = 0
    t = 0.0
    for s in range(n_steps + 1):
        times[s] = t
        states[s] = x
        w = np.asarray(omega_of_t(t), dtype=float)
        controls[s] = w
        if s == n_steps:
            break
        k1 = f(x, w)
        k2 = f(x + 0.5 * dt * k1, omega_of_t(t + 0.5 * dt))
        k3 = f(x + 0.5 * dt * k2, omega_of_t(t + 0.5 * dt))
        k4 = f(x + dt * k3, omega_of_t(t + dt))
        x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        x, drift = _renormalize(game, x)
        renorms += drift
        t += dt
    return Trajectory(times, states, controls, renorms)


# -- data collection ----------------------------------------------------------------

def collect_dataset(f: VectorField, x0: Sequence[float], K: int,
                    rng: np.random.Generator,
                    sigma_noise: Optional[float] = None,
                    dt_sample: float = 0.1,
                    dt_int: float = 0.01,
                    velocity_mode: str = "measured") -> TrajectoryDataset:
    """Drive the true field with clipped mean-zero Gaussian controls and record
    K samples (x, omega, xdot) at multiples of dt_sample."""
    if K < 1:
        raise DynamicsError("K must be at least 1")
    if velocity_mode not in ("measured", "finite-difference"):
        raise DynamicsError(f"unknown velocity mode {velocity_mode!r}")
    game = f.game
    lo, hi = game.control_bounds[:, 0], game.control_bounds[:, 1]
    if sigma_noise is None:
        draws = rng.normal(0.0, 1.0, size=(K, game.n_controls)) * (0.1 * (hi - lo))
    else:
        draws = rng.normal(0.0, sigma_noise, size=(K, game.n_controls))
    omegas = np.clip(draws, lo, hi)

    def omega_of_t(t: float) -> np.ndarray:
        idx = min(int(t / dt_sample + 1e-9), K - 1)
        return omegas[idx]

    traj = integrate(f, x0, omega_of_t, dt=dt_int, T=(K - 1) * dt_sample if K > 1 else dt_int)
    stride = max(int(round(dt_sample / dt_int)), 1)
    idxs = [min(k * stride, len(traj.times) - 1) for k in range(K)]
    times = traj.times[idxs]
    states = traj.states[idxs]

    if velocity_mode == "measured":
        vels = np.array([f(states[k], omegas[k]) for k in range(K)])
        prov = tuple("measured" for _ in range(K))
    else:
        vels = np.empty_like(states)
        for k in range(K):
            if 0 < k < K - 1:
                vels[k] = (states[k + 1] - states[k - 1]) / (2.0 * dt_sample)
            elif k == 0:
                vels[k] = (states[min(1, K - 1)] - states[0]) / dt_sample if K > 1 \
                    else f(states[0], omegas[0])
            else:
                vels[k] = (states[k] - states[k - 1]) / dt_sample
        prov = tuple("finite-difference" for _ in range(K))
    return TrajectoryDataset(times, states, omegas, vels, prov)
