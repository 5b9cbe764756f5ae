"""Experiment orchestration: scenarios, sweeps, metrics and CSV reports.

A Scenario bundles everything one run needs: the game, the true dynamics,
the identification method, data-collection parameters, the controller
configuration and the three phase durations.  run_scenario executes the
protocol (identify from K noisy-control samples, evaluate the model open
loop against the truth, steer closed loop to the target) and reports the
metrics used throughout: per-coordinate MSE against the reference over the
steering phase, the per-coordinate terminal error, the accumulated control
cost, and held-out velocity MSE against the true field.

Configs are flat "section/key = value" text files; see parse_config.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import baselines, mpc, siarc
from .dynamics import TrajectoryDataset, VectorField, collect_dataset, integrate
from .game import (Game, StagHuntClass, StrategyProfile, ZeroSum2x2InteriorNE,
                   interior_ne_2x2, make_matching_pennies, make_rps,
                   make_stag_hunt, random_game)


class BenchError(ValueError):
    pass


# -- scenario -------------------------------------------------------------------------

@dataclass
class Scenario:
    name: str = "scenario"
    game_name: str = "stag_hunt"        # stag_hunt | matching_pennies | rps
    game_params: Dict[str, float] = field(default_factory=dict)
    game: Optional[Game] = None         # explicit payoffs override the name
    dynamics: str = "replicator"        # replicator | log_barrier
    method: str = "siarc"               # siarc | sindy | pinn
    method_params: Dict[str, float] = field(default_factory=dict)
    K: int = 4
    sigma_noise: Optional[float] = None
    dt_sample: float = 0.1
    velocity_mode: str = "measured"
    x0: Sequence[float] = (0.4, 0.3)    # reduced or flat coordinates
    target: object = "pure:0,0"         # pure:a1,a2 | interior_ne | uniform | flat list
    horizon: int = 10
    mpc_dt: float = 0.1
    alpha: float = 0.01
    beta: float = 0.01
    avoid: List[mpc.Avoidance] = field(default_factory=list)
    T_evaluate: float = 2.0
    T_steer: float = 15.0
    seed: int = 0

    def __post_init__(self):
        if self.T_evaluate <= 0 or self.T_steer <= 0:
            raise BenchError("phase durations must be positive")

    def build_game(self) -> Game:
        if self.game is not None:
            return self.game
        if self.game_name == "stag_hunt":
            return make_stag_hunt()
        if self.game_name == "matching_pennies":
            return make_matching_pennies()
        if self.game_name == "rps":
            return make_rps(float(self.game_params.get("eps", 0.25)))
        raise BenchError(f"unknown game {self.game_name!r}")

    def build_field(self, game: Game) -> VectorField:
        from . import dynamics as dyn
        if self.dynamics == "replicator":
            return dyn.replicator(game)
        if self.dynamics == "log_barrier":
            return dyn.log_barrier(game)
        raise BenchError(f"unknown dynamics {self.dynamics!r}")

    def config_text(self) -> str:
        """Canonical flat text form (also the hashing input)."""
        lines = []
        lines.append(f"run/name = {self.name}")
        lines.append(f"run/seed = {self.seed}")
        lines.append(f"run/x0 = {','.join(repr(float(v)) for v in self.x0)}")
        lines.append(f"run/target = {_target_text(self.target)}")
        lines.append(f"game/name = {self.game_name}")
        for k in sorted(self.game_params):
            lines.append(f"game/{k} = {self.game_params[k]!r}")
        if self.game is not None:
            for i, u in enumerate(self.game.base_payoff):
                flat = ",".join(repr(float(v)) for v in np.asarray(u).ravel())
                lines.append(f"game/payoff_{i + 1} = {flat}")
        lines.append(f"game/dynamics = {self.dynamics}")
        lines.append(f"method/name = {self.method}")
        for k in sorted(self.method_params):
            lines.append(f"method/{k} = {self.method_params[k]!r}")
        lines.append(f"data/K = {self.K}")
        lines.append(f"data/sigma_noise = "
                     f"{'' if self.sigma_noise is None else repr(self.sigma_noise)}")
        lines.append(f"data/dt_sample = {self.dt_sample!r}")
        lines.append(f"data/velocity_mode = {self.velocity_mode}")
        lines.append(f"mpc/horizon = {self.horizon}")
        lines.append(f"mpc/dt = {self.mpc_dt!r}")
        lines.append(f"mpc/alpha = {self.alpha!r}")
        lines.append(f"mpc/beta = {self.beta!r}")
        for av in self.avoid:
            c = ",".join(repr(float(v)) for v in av.center)
            lines.append(f"mpc/avoid = {c};{av.radius!r};{av.weight!r}")
        lines.append(f"phases/T_evaluate = {self.T_evaluate!r}")
        lines.append(f"phases/T_steer = {self.T_steer!r}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.config_text().encode()).hexdigest()[:16]


def _target_text(t) -> str:
    if isinstance(t, str):
        return t
    return "flat:" + ",".join(repr(float(v)) for v in np.asarray(t, dtype=float))


def lift_x0(game: Game, x0: Sequence[float]) -> np.ndarray:
    """Accept reduced (one per dropped coordinate short) or flat coordinates."""
    x0 = np.asarray(x0, dtype=float)
    if x0.size == game.n_states:
        return x0.copy()
    n_red = game.n_states - game.n_players
    if x0.size != n_red:
        raise BenchError(f"x0 has {x0.size} entries, expected {n_red} reduced "
                         f"or {game.n_states} flat")
    offs = game.state_offsets()
    full = np.zeros(game.n_states)
    j = 0
    for i in range(game.n_players):
        m = game.action_counts[i]
        block = x0[j:j + m - 1]
        j += m - 1
        full[offs[i]:offs[i] + m - 1] = block
        full[offs[i + 1] - 1] = 1.0 - float(np.sum(block))
    return full


def resolve_target(game: Game, spec) -> np.ndarray:
    if isinstance(spec, str):
        if spec == "interior_ne":
            return interior_ne_2x2(game).flat()
        if spec == "uniform":
            return np.concatenate([np.full(m, 1.0 / m) for m in game.action_counts])
        if spec.startswith("pure:"):
            acts = [int(v) for v in spec[5:].split(",")]
            full = np.zeros(game.n_states)
            offs = game.state_offsets()
            for i, a in enumerate(acts):
                full[offs[i] + a] = 1.0
            return full
        if spec.startswith("flat:"):
            return np.asarray([float(v) for v in spec[5:].split(",")])
        raise BenchError(f"unknown target spec {spec!r}")
    target = lift_x0(game, spec)
    StrategyProfile.from_flat(game, target)  # must lie on the simplex
    return target


# -- metrics --------------------------------------------------------------------------

@dataclass
class MetricsRecord:
    mse_ref: np.ndarray                 # per coordinate, steering phase
    error_at_tfinal: np.ndarray         # per coordinate
    cost: float
    mse_true: Optional[np.ndarray]      # per coordinate, held-out velocities

    def as_row(self) -> Dict[str, float]:
        row = {}
        for j, v in enumerate(self.mse_ref):
            row[f"mse_ref_{j + 1}"] = float(v)
        for j, v in enumerate(self.error_at_tfinal):
            row[f"error_at_tfinal_{j + 1}"] = float(v)
        row["cost"] = float(self.cost)
        if self.mse_true is not None:
            for j, v in enumerate(self.mse_true):
                row[f"mse_true_{j + 1}"] = float(v)
        return row


def compute_metrics(log: mpc.ClosedLoopLog, target: np.ndarray,
                    mse_true: Optional[np.ndarray]) -> MetricsRecord:
    """Metric definitions, applied to the tagged closed-loop log."""
    tags = log.phases or tuple("steer" for _ in log.times)
    steer = np.array([ph == "steer" for ph in tags])
    if not steer.any():
        raise BenchError("log has no steering phase")
    diffs = log.states[steer] - target
    mse_ref = np.mean(diffs ** 2, axis=0)
    error = np.abs(log.states[-1] - target)
    cost = mpc.accumulated_cost(log, phases=tags)
    return MetricsRecord(mse_ref, error, cost, mse_true)


def _fit(scenario: Scenario, ds: TrajectoryDataset, game: Game,
         rng: np.random.Generator):
    p = scenario.method_params
    if scenario.method == "siarc":
        kwargs = {}
        if "degree" in p:
            kwargs["degree"] = int(p["degree"])
        if "face_degree" in p:
            kwargs["face_degree"] = int(p["face_degree"])
        return siarc.fit(ds, game, siarc.SiarcConfig(**kwargs))
    if scenario.method == "sindy":
        cfg = baselines.SindyConfig(
            degree=int(p.get("degree", 4)),
            threshold=float(p.get("threshold", 1e-3)))
        return baselines.sindy_fit(ds, game, cfg)
    if scenario.method == "pinn":
        weights = baselines.PinnLossWeights(
            lam0=float(p.get("lam0", 1.0)),
            lam_rfi=float(p.get("lam_rfi", 1.0)),
            lam_pc=float(p.get("lam_pc", 1.0)),
            n_face=int(p.get("n_face", 500)),
            n_pc=int(p.get("n_pc", 500)))
        return baselines.pinn_fit(ds, game, weights,
                                  epochs=int(p.get("epochs", 20_000)), rng=rng)
    raise BenchError(f"unknown method {scenario.method!r}")


def identify(scenario: Scenario):
    """Phase 1 alone: collect the dataset and fit the model."""
    game = scenario.build_game()
    true_field = scenario.build_field(game)
    rng = np.random.default_rng(scenario.seed)
    x0 = lift_x0(game, scenario.x0)
    ds = collect_dataset(true_field, x0, scenario.K, rng,
                         sigma_noise=scenario.sigma_noise,
                         dt_sample=scenario.dt_sample,
                         velocity_mode=scenario.velocity_mode)
    try:
        model = _fit(scenario, ds, game, rng)
    except Exception as exc:
        raise BenchError(f"scenario {scenario.name!r}: fit failed: {exc}") from exc
    return game, true_field, ds, model, rng


def mse_true_of(model, true_field: VectorField, game: Game,
                n_samples: int = 500,
                rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Per-coordinate held-out velocity MSE for any model with as_field()."""
    rng = rng or np.random.default_rng(0)
    pts = siarc.sample_joint(game, n_samples, rng)
    n_x = game.n_states
    f = model.as_field()
    pred = np.array([f(p[:n_x], p[n_x:]) for p in pts])
    true = np.array([true_field(p[:n_x], p[n_x:]) for p in pts])
    return np.mean((pred - true) ** 2, axis=0)


def run_scenario(scenario: Scenario) -> Tuple[mpc.ClosedLoopLog, MetricsRecord]:
    """The three-phase protocol; metrics are computed on the steering phase."""
    game, true_field, ds, model, rng = identify(scenario)
    model_field = model.as_field()
    target = resolve_target(game, scenario.target)

    # phase 2: fresh random piecewise-constant controls; roll model and truth
    # from the same point and log the truth (predicted states are diagnostic)
    x_id_end = ds.states[-1]
    lo, hi = game.control_bounds[:, 0], game.control_bounds[:, 1]
    n_seg = max(int(round(scenario.T_evaluate / scenario.dt_sample)), 1)
    eval_controls = np.clip(
        rng.normal(0.0, 1.0, size=(n_seg, game.n_controls)) * (0.1 * (hi - lo)),
        lo, hi)

    def omega_eval(t: float) -> np.ndarray:
        return eval_controls[min(int(t / scenario.dt_sample + 1e-9), n_seg - 1)]

    tr_true = integrate(true_field, x_id_end, omega_eval,
                        dt=scenario.dt_sample / 10.0, T=scenario.T_evaluate)
    tr_model = integrate(VectorField(game, model_field.func,
                                     symbolic=model_field.symbolic,
                                     name=model_field.name),
                         x_id_end, omega_eval,
                         dt=scenario.dt_sample / 10.0, T=scenario.T_evaluate)

    # phase 3: closed-loop steering from where the evaluation left the truth
    cfg = mpc.MpcConfig(target=target, horizon=scenario.horizon,
                        dt=scenario.mpc_dt, alpha=scenario.alpha,
                        beta=scenario.beta, avoid=list(scenario.avoid),
                        seed=scenario.seed)
    steer_log = mpc.run_closed_loop(true_field, model_field, tr_true.states[-1],
                                    cfg, scenario.T_steer)

    # stitch the phases into one tagged log
    t_id = ds.times
    t_ev = ds.times[-1] + tr_true.times
    t_st = t_ev[-1] + steer_log.times
    stride = 10
    ev_idx = np.arange(0, len(tr_true.times), stride)
    times = np.concatenate([t_id, t_ev[ev_idx], t_st])
    states = np.vstack([ds.states, tr_true.states[ev_idx], steer_log.states])
    controls = np.vstack([ds.controls, tr_true.controls[ev_idx],
                          steer_log.controls])
    objectives = np.concatenate([np.zeros(len(t_id) + len(ev_idx)),
                                 steer_log.objectives])
    phases = tuple(["identify"] * len(t_id) + ["evaluate"] * len(ev_idx)
                   + ["steer"] * len(steer_log.times))
    log = mpc.ClosedLoopLog(times, states, controls, objectives,
                            steer_log.dt, phases)

    mt = mse_true_of(model, true_field, game,
                     rng=np.random.default_rng(scenario.seed + 1))
    record = compute_metrics(log, target, mt)
    record._eval_pred = tr_model.states[ev_idx]   # diagnostic attachment
    record._eval_true = tr_true.states[ev_idx]
    record._model = model
    return log, record


# -- sweeps ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    mean: MetricsRecord
    records: List[MetricsRecord]
    scenarios: List[Scenario]
    logs: List[mpc.ClosedLoopLog]
    failures: List[Tuple[str, str]]     # (scenario name, error text)


def _aggregate(records: List[MetricsRecord]) -> MetricsRecord:
    if not records:
        raise BenchError("no successful runs to aggregate")
    mse_true = None
    if all(r.mse_true is not None for r in records):
        mse_true = np.mean([r.mse_true for r in records], axis=0)
    return MetricsRecord(
        np.mean([r.mse_ref for r in records], axis=0),
        np.mean([r.error_at_tfinal for r in records], axis=0),
        float(np.mean([r.cost for r in records])),
        mse_true)


def latin_hypercube(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """One sample per axis-aligned stratum per dimension, in [0, 1)."""
    u = rng.uniform(size=(n, dim))
    out = np.empty((n, dim))
    for j in range(dim):
        out[:, j] = (rng.permutation(n) + u[:, j]) / n
    return out


def default_x0_sampler(game: Game, n: int, rng: np.random.Generator) -> np.ndarray:
    """Reduced-box Latin hypercube for 2x2 games, Dirichlet per player else."""
    if all(m == 2 for m in game.action_counts):
        pts = latin_hypercube(n, game.n_players, rng)
        # keep away from the exact corners, where replicator data is static
        return 0.02 + 0.96 * pts
    cols = [rng.dirichlet(np.ones(m), size=n) for m in game.action_counts]
    return np.hstack(cols)


def sweep_initial_conditions(scenario: Scenario, n: int,
                             sampler: Optional[Callable] = None) -> SweepResult:
    if n < 1:
        raise BenchError("n must be at least 1")
    game = scenario.build_game()
    rng = np.random.default_rng(scenario.seed)
    sample = (sampler or default_x0_sampler)(game, n, rng)
    records, scenarios, logs, failures = [], [], [], []
    for idx in range(n):
        s = replace(scenario, name=f"{scenario.name}_ic{idx}",
                    x0=np.asarray(sample[idx]), seed=scenario.seed + 1000 + idx)
        try:
            log, rec = run_scenario(s)
        except Exception as exc:
            failures.append((s.name, str(exc)))
            continue
        records.append(rec)
        scenarios.append(s)
        logs.append(log)
    return SweepResult(_aggregate(records), records, scenarios, logs, failures)


def sweep_payoffs(kind, n: int, base: Scenario) -> SweepResult:
    if n < 1:
        raise BenchError("n must be at least 1")
    rng = np.random.default_rng(base.seed)
    records, scenarios, logs, failures = [], [], [], []
    for idx in range(n):
        g = random_game(kind, rng)
        if kind is StagHuntClass:
            target = "pure:0,0"
        elif kind is ZeroSum2x2InteriorNE:
            target = "interior_ne"
        else:
            raise BenchError(f"unsupported payoff class {kind!r}")
        s = replace(base, name=f"{base.name}_pay{idx}", game=g, target=target,
                    seed=base.seed + 2000 + idx)
        try:
            log, rec = run_scenario(s)
        except Exception as exc:
            failures.append((s.name, str(exc)))
            continue
        records.append(rec)
        scenarios.append(s)
        logs.append(log)
    return SweepResult(_aggregate(records), records, scenarios, logs, failures)


# -- reporting ------------------------------------------------------------------------

def emit_report(records: Sequence[Tuple[Scenario, MetricsRecord]], path: str,
                logs: Optional[Sequence[mpc.ClosedLoopLog]] = None):
    """Summary CSV plus one trajectory CSV per run (when logs are given)."""
    cols: List[str] = []
    rows = []
    for scenario, rec in records:
        row = {"scenario": scenario.name, "method": scenario.method,
               "config_hash": scenario.config_hash(), "seed": scenario.seed}
        row.update(rec.as_row())
        rows.append(row)
        for k in row:
            if k not in cols:
                cols.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([repr(row[k]) if isinstance(row.get(k), float)
                        else row.get(k, "") for k in cols])
    if logs is not None:
        stem = path[:-4] if path.endswith(".csv") else path
        for (scenario, _), log in zip(records, logs):
            log.to_csv(f"{stem}_{scenario.name}_traj.csv",
                       scenario.build_game())


def read_report(path: str) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- config text ----------------------------------------------------------------------

def parse_config(text: str) -> Scenario:
    """Flat 'section/key = value' lines; unknown keys are an error."""
    kv: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise BenchError(f"config line {lineno}: missing '='")
        key, val = line.split("=", 1)
        kv[key.strip()] = val.strip()

    def pop(key, default=None):
        return kv.pop(key, default)

    s = Scenario()
    s.name = pop("run/name", s.name)
    s.seed = int(pop("run/seed", s.seed))
    if "run/x0" in kv:
        s.x0 = [float(v) for v in pop("run/x0").split(",")]
    s.target = pop("run/target", s.target)
    s.game_name = pop("game/name", s.game_name)
    s.dynamics = pop("game/dynamics", s.dynamics)
    s.method = pop("method/name", s.method)
    s.K = int(pop("data/K", s.K))
    sn = pop("data/sigma_noise", "")
    s.sigma_noise = float(sn) if sn else None
    s.dt_sample = float(pop("data/dt_sample", s.dt_sample))
    s.velocity_mode = pop("data/velocity_mode", s.velocity_mode)
    s.horizon = int(pop("mpc/horizon", s.horizon))
    s.mpc_dt = float(pop("mpc/dt", s.mpc_dt))
    s.alpha = float(pop("mpc/alpha", s.alpha))
    s.beta = float(pop("mpc/beta", s.beta))
    s.T_evaluate = float(pop("phases/T_evaluate", s.T_evaluate))
    s.T_steer = float(pop("phases/T_steer", s.T_steer))
    avoid = pop("mpc/avoid", "")
    if avoid:
        center_txt, radius_txt, weight_txt = avoid.split(";")
        s.avoid = [mpc.Avoidance(
            np.asarray([float(v) for v in center_txt.split(",")]),
            float(radius_txt), float(weight_txt))]
    payoffs = {}
    for key in list(kv):
        section, _, name = key.partition("/")
        if section == "game" and name.startswith("payoff_"):
            payoffs[int(name[7:])] = [float(v) for v in kv.pop(key).split(",")]
        elif section == "game":
            s.game_params[name] = float(kv.pop(key))
        elif section == "method":
            s.method_params[name] = float(kv.pop(key))
    if payoffs:
        template = s.build_game()
        shaped = tuple(np.asarray(payoffs[i + 1]).reshape(template.action_counts)
                       for i in range(len(payoffs)))
        s.game = Game(template.action_counts, shaped,
                      dict(template.control_map),
                      template.control_bounds.copy(), name=s.game_name)
    if kv:
        raise BenchError(f"unknown config keys: {sorted(kv)}")
    # avoidance centers may come in reduced coordinates
    if s.avoid:
        game = s.build_game()
        s.avoid = [mpc.Avoidance(lift_x0(game, av.center), av.radius, av.weight)
                   for av in s.avoid]
    return s


def load_config(path: str) -> Scenario:
    with open(path) as fh:
        return parse_config(fh.read())
