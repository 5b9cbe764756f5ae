"""Receding-horizon steering of game dynamics with a fitted model.

At each control instant the planner minimizes

    sum_n ||x_n - x*||^2 + alpha sum_n ||w_n||^2 + beta sum_n ||w_n - w_{n-1}||^2

over box-constrained control sequences, predicting with Euler steps of the
model.  The first planned control is applied to the true system for one
step, the measurement is refreshed, and planning repeats from the shifted
previous solution.  Gradients through the rollout are analytic when the
model is polynomial and finite-difference otherwise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .dynamics import Trajectory, VectorField, integrate
from .game import Game, StrategyProfile
from .poly import Polynomial, StackedPolyEval, partial


class MpcError(ValueError):
    pass


@dataclass
class Avoidance:
    center: np.ndarray   # flat strategy coordinates
    radius: float
    weight: float = 100.0

    def __post_init__(self):
        if self.radius <= 0:
            raise MpcError("avoidance radius must be positive")


@dataclass
class MpcConfig:
    target: np.ndarray               # flat strategy coordinates
    horizon: int = 10
    dt: float = 0.1
    alpha: float = 0.01
    beta: float = 0.01
    avoid: List[Avoidance] = field(default_factory=list)
    iters: int = 300
    step: float = 0.1
    restarts: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1 or self.dt <= 0 or self.alpha < 0 or self.beta < 0:
            raise MpcError("bad MPC configuration")


@dataclass
class ClosedLoopLog:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    objectives: np.ndarray
    dt: float
    phases: Tuple[str, ...] = ()

    def to_csv(self, path: str, game: Game):
        names = []
        for i, m in enumerate(game.action_counts):
            names.extend(f"x_{i + 1}_{a + 1}" for a in range(m))
        header = ["t"] + names + [f"omega_{k + 1}" for k in range(game.n_controls)] \
            + ["phase"]
        phases = self.phases or tuple("steer" for _ in self.times)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t, x, u, ph in zip(self.times, self.states, self.controls, phases):
                w.writerow([repr(t)] + [repr(v) for v in x] + [repr(v) for v in u] + [ph])


class _ModelRollout:
    """Euler rollout of a model with analytic or numeric Jacobians."""

    def __init__(self, field_model: VectorField, game: Game):
        self.field = field_model
        self.game = game
        self.n_x = game.n_states
        self.n_w = game.n_controls
        if field_model.symbolic is not None:
            polys = field_model.symbolic
            self.eval = StackedPolyEval(polys)
            dim = polys[0].space.dim
            self.jac = StackedPolyEval([partial(p, v)
                                        for p in polys for v in range(dim)])
            self.analytic = True
        else:
            self.analytic = False

    def f(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        if self.analytic:
            return self.eval(np.concatenate([x, w]))
        return self.field(x, w)

    def jacobians(self, x: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        n_x, n_w = self.n_x, self.n_w
        if self.analytic:
            J = self.jac(np.concatenate([x, w])).reshape(n_x, n_x + n_w)
            return J[:, :n_x], J[:, n_x:]
        h = 1e-6
        Jx = np.empty((n_x, n_x))
        Jw = np.empty((n_x, n_w))
        f0 = self.field(x, w)
        for j in range(n_x):
            e = np.zeros(n_x)
            e[j] = h
            Jx[:, j] = (self.field(x + e, w) - self.field(x - e, w)) / (2 * h)
        for j in range(n_w):
            e = np.zeros(n_w)
            e[j] = h
            Jw[:, j] = (self.field(x, w + e) - self.field(x, w - e)) / (2 * h)
        return Jx, Jw


def _objective_and_grad(roll: _ModelRollout, x0: np.ndarray, W: np.ndarray,
                        cfg: MpcConfig) -> Tuple[float, np.ndarray]:
    """Cost of the control sequence W (N, q) and its gradient, by adjoint."""
    N = cfg.horizon
    xs = [np.asarray(x0, dtype=float)]
    Jxs, Jws = [], []
    for n in range(N):
        Jx, Jw = roll.jacobians(xs[n], W[n])
        Jxs.append(Jx)
        Jws.append(Jw)
        xs.append(xs[n] + cfg.dt * roll.f(xs[n], W[n]))

    obj = 0.0
    state_grads = [np.zeros_like(x0) for _ in range(N + 1)]
    for n in range(1, N + 1):
        d = xs[n] - cfg.target
        obj += float(d @ d)
        state_grads[n] += 2.0 * d
        for av in cfg.avoid:
            dc = xs[n] - av.center
            gap = av.radius ** 2 - float(dc @ dc)
            if gap > 0.0:
                obj += av.weight * gap ** 2
                state_grads[n] += av.weight * 2.0 * gap * (-2.0 * dc)
    obj += cfg.alpha * float(np.sum(W * W))
    grad = 2.0 * cfg.alpha * W.copy()
    for n in range(1, N):
        dv = W[n] - W[n - 1]
        obj += cfg.beta * float(dv @ dv)
        grad[n] += 2.0 * cfg.beta * dv
        grad[n - 1] -= 2.0 * cfg.beta * dv

    lam = state_grads[N].copy()
    for n in range(N - 1, -1, -1):
        grad[n] += cfg.dt * (Jws[n].T @ lam)
        lam = state_grads[n] + lam + cfg.dt * (Jxs[n].T @ lam)
    return obj, grad


def _project_box(W: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.clip(W, lo, hi)


def _descend(roll: _ModelRollout, x0: np.ndarray, W: np.ndarray,
             cfg: MpcConfig, lo: np.ndarray, hi: np.ndarray
             ) -> Tuple[np.ndarray, float]:
    W = _project_box(W, lo, hi)
    obj, grad = _objective_and_grad(roll, x0, W, cfg)
    step = cfg.step
    for _ in range(cfg.iters):
        cand = _project_box(W - step * grad, lo, hi)
        cobj, cgrad = _objective_and_grad(roll, x0, cand, cfg)
        if cobj < obj - 1e-14:
            W, obj, grad = cand, cobj, cgrad
            step = min(step * 1.3, 10.0 * cfg.step)
        else:
            step *= 0.5
            if step < 1e-12:
                break
    return W, obj


def plan(model_field: VectorField, x_t: Sequence[float], cfg: MpcConfig,
         warm: Optional[np.ndarray] = None) -> Tuple[np.ndarray, float]:
    """Best box-feasible control sequence found by multi-start projected descent."""
    game = model_field.game
    StrategyProfile.from_flat(game, np.asarray(x_t, dtype=float))
    roll = _ModelRollout(model_field, game)
    lo = game.control_bounds[:, 0][None, :]
    hi = game.control_bounds[:, 1][None, :]
    N, q = cfg.horizon, game.n_controls
    rng = np.random.default_rng(cfg.seed)
    starts = []
    if warm is not None:
        starts.append(np.asarray(warm, dtype=float).reshape(N, q))
    starts.append(np.clip(np.zeros((N, q)), lo, hi))
    for _ in range(cfg.restarts):
        starts.append(rng.uniform(np.broadcast_to(lo, (N, q)),
                                  np.broadcast_to(hi, (N, q))))
    best_W, best_obj = None, np.inf
    x0 = np.asarray(x_t, dtype=float)
    for W0 in starts:
        W, obj = _descend(roll, x0, W0, cfg, lo, hi)
        if obj < best_obj:
            best_W, best_obj = W, obj
    return best_W, best_obj


def run_closed_loop(true_field: VectorField, model_field: VectorField,
                    x0: Sequence[float], cfg: MpcConfig, T_total: float,
                    assert_warm_monotone: bool = True) -> ClosedLoopLog:
    game = true_field.game
    roll = _ModelRollout(model_field, game)
    lo = game.control_bounds[:, 0][None, :]
    hi = game.control_bounds[:, 1][None, :]
    n_steps = int(round(T_total / cfg.dt))
    x = np.asarray(x0, dtype=float).copy()
    times = np.empty(n_steps + 1)
    states = np.empty((n_steps + 1, len(x)))
    controls = np.zeros((n_steps + 1, game.n_controls))
    objectives = np.zeros(n_steps + 1)
    warm = None
    for s in range(n_steps):
        times[s] = s * cfg.dt
        states[s] = x
        W, obj = plan(model_field, x, cfg, warm=warm)
        if warm is not None and assert_warm_monotone:
            warm_obj, _ = _objective_and_grad(roll, x, np.clip(warm, lo, hi), cfg)
            if obj > warm_obj + 1e-9:
                raise MpcError("descent increased the warm-start objective")
        w0 = W[0]
        controls[s] = w0
        objectives[s] = obj
        tr = integrate(true_field, x, lambda t: w0, dt=cfg.dt / 10.0, T=cfg.dt)
        x = tr.states[-1]
        warm = np.vstack([W[1:], W[-1:]])
    times[-1] = n_steps * cfg.dt
    states[-1] = x
    return ClosedLoopLog(times, states, controls, objectives, cfg.dt)


def accumulated_cost(log: ClosedLoopLog, phases: Optional[Sequence[str]] = None) -> float:
    """Sum of ||omega||^2 * dt over steps (steering phase only when tagged)."""
    total = 0.0
    tags = phases if phases is not None else (log.phases or None)
    for s in range(len(log.times) - 1):
        if tags is not None and tags[s] != "steer":
            continue
        w = log.controls[s]
        total += float(w @ w) * log.dt
    return total
