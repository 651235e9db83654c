"""Experiment orchestration: configs, the interaction loop, step-size tuning and presets."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import envs, metrics
from .core import LOSS_KINDS, Domain, RoundLoss
from .optimizers import (
    ALGOS,
    StepSchedule,
    canonical_algo,
    default_schedule,
    init_state,
    step,
)
from .solvers import SolverConfig

log = logging.getLogger(__name__)

PRESETS = ("gridworld_adversarial", "gridworld_stationary", "toy_simple", "toy_adversarial")
DECADES = tuple(10.0**k for k in range(-5, 6))
ROW_FIELDS = (
    "round",
    "env_steps",
    "loss",
    "avg_cumulative_loss",
    "cumulative_regret",
    "cumulative_reward",
    "eta_t",
    "sigma_t",
    "inner_iters",
    "solver_converged",
)
LOSS_ALIASES = {"l2": "squared", "l1": "absolute", "ce": "logistic", "xent": "logistic"}


class ConfigError(ValueError):
    pass


def canonical_loss(name: str) -> str:
    kind = LOSS_ALIASES.get(name.lower(), name.lower())
    if kind not in LOSS_KINDS or kind == "linear":
        raise ConfigError(f"unknown loss {name!r}")
    return kind


@dataclass(frozen=True)
class GridworldSpec:
    width: int = 7
    height: int = 7
    horizon: int = 5
    gamma: float = 0.9
    expert: str = "alternating"
    expert_rule: str = "random"
    episodes_per_round: int = 1
    loss_mode: str = "sampled"

    def __post_init__(self):
        if min(self.width, self.height, self.horizon, self.episodes_per_round) < 1:
            raise ConfigError("grid sizes, horizon and episodes must be positive")
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.expert not in ("alternating", "stationary"):
            raise ConfigError(f"unknown expert {self.expert!r}")
        if self.expert_rule not in ("random", "checker"):
            raise ConfigError(f"unknown expert rule {self.expert_rule!r}")
        if self.loss_mode not in ("sampled", "expected"):
            raise ConfigError(f"unknown loss mode {self.loss_mode!r}")

    @property
    def interactions_per_round(self) -> int:
        return self.episodes_per_round * self.horizon

    def build(self, seed: int = 0) -> envs.Mdp:
        if self.expert == "stationary":
            oracle = envs.goal_expert(self.width, self.height)
        else:
            oracle = envs.ExpertOracle(kind="alternating", rule=self.expert_rule, seed=seed)
        return envs.Mdp(self.width, self.height, self.horizon, self.gamma, oracle)


EnvSpec = Union[GridworldSpec, envs.ToyStreamConfig]


def env_interactions(env: EnvSpec) -> int:
    if isinstance(env, GridworldSpec):
        return env.interactions_per_round
    return env.samples_per_round


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvSpec
    algo: str = "FTL"
    schedule: Optional[StepSchedule] = None
    inner_solver: SolverConfig = SolverConfig()
    interactions_per_round: int = 0
    total_interactions: int = 0
    behavior: str = "agent"
    seeds: tuple = (0,)
    loss_kind: str = "squared"
    domain: Domain = Domain.unconstrained()
    delta: float = 1.0
    bounds: tuple = ()
    measured_schedule: bool = False
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "algo", canonical_algo(self.algo))
        object.__setattr__(self, "loss_kind", canonical_loss(self.loss_kind))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        M = env_interactions(self.env)
        if self.interactions_per_round == 0:
            object.__setattr__(self, "interactions_per_round", M)
        if self.interactions_per_round != M:
            raise ConfigError(f"interactions_per_round={self.interactions_per_round} but the env takes {M}")
        if self.total_interactions <= 0 or self.total_interactions % M:
            raise ConfigError(f"total_interactions must be a positive multiple of {M}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.behavior not in ("agent", "expert"):
            raise ConfigError(f"unknown behavior {self.behavior!r}")
        if self.behavior == "expert" and not isinstance(self.env, GridworldSpec):
            raise ConfigError("expert behavior needs a gridworld environment")
        for b in self.bounds:
            if b not in metrics.BOUNDS:
                raise ConfigError(f"unknown bound {b!r}")

    @property
    def rounds(self) -> int:
        return self.total_interactions // self.interactions_per_round

    @property
    def is_gridworld(self) -> bool:
        return isinstance(self.env, GridworldSpec)

    def dim(self) -> int:
        if self.is_gridworld:
            return envs.N_ACTIONS * self.env.width * self.env.height
        return self.env.d_feature * self.env.d_output

    def resolved_schedule(self) -> StepSchedule:
        sched = self.schedule if self.schedule is not None else default_schedule(self.algo, self.domain)
        return copy.deepcopy(sched)

    def with_rounds(self, rounds: int) -> "ExperimentConfig":
        env = self.env
        if not self.is_gridworld:
            env = replace(env, rounds=rounds)
        return replace(self, env=env, total_interactions=rounds * self.interactions_per_round)

    def with_step(self, value: float) -> "ExperimentConfig":
        """Same config with the outer step size (``eta`` or ``alpha``) set to ``value``."""
        s = self.resolved_schedule()
        if s.kind == "constant":
            if math.isinf(s.eta):
                return self
            s = StepSchedule.constant(value)
        elif s.kind in ("inverse_sqrt_t", "adaptive_grad_norm"):
            s = replace(s, alpha=value, grad_sq_sum=0.0)
        else:
            raise ConfigError("the theorem2 schedule has no tunable step")
        return replace(self, schedule=s)

    def to_dict(self) -> dict:
        env = asdict(self.env)
        env["type"] = "gridworld" if self.is_gridworld else "toy"
        return {
            "name": self.name,
            "env": env,
            "algo": self.algo,
            "schedule": self.resolved_schedule().to_dict(),
            "inner_solver": self.inner_solver.to_dict(),
            "interactions_per_round": self.interactions_per_round,
            "total_interactions": self.total_interactions,
            "behavior": self.behavior,
            "seeds": list(self.seeds),
            "loss_kind": self.loss_kind,
            "domain": self.domain.to_dict(),
            "delta": self.delta,
            "bounds": list(self.bounds),
            "measured_schedule": self.measured_schedule,
        }

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("seeds")
        blob = json.dumps(d, sort_keys=True, default=repr).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _strict(cls, data: dict, what: str):
    names = {f.name for f in fields(cls)}
    extra = set(data) - names
    if extra:
        raise ConfigError(f"unknown {what} keys: {', '.join(sorted(extra))}")
    return cls(**data)


def config_from_dict(d: dict) -> ExperimentConfig:
    """Inverse of :meth:`ExperimentConfig.to_dict`; unknown keys are errors."""
    d = dict(d)
    allowed = {f.name for f in fields(ExperimentConfig)}
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(extra))}")
    try:
        env = dict(d.pop("env"))
    except KeyError:
        raise ConfigError("config needs an 'env' section") from None
    kind = env.pop("type", "toy")
    if kind == "gridworld":
        d["env"] = _strict(GridworldSpec, env, "gridworld")
    elif kind == "toy":
        d["env"] = _strict(envs.ToyStreamConfig, env, "toy")
    else:
        raise ConfigError(f"unknown env type {kind!r}")
    if "schedule" in d and d["schedule"] is not None:
        sched = dict(d["schedule"])
        if sched.get("eta") in ("inf", "Infinity"):
            sched["eta"] = math.inf
        d["schedule"] = _strict(StepSchedule, sched, "schedule")
    if "inner_solver" in d:
        d["inner_solver"] = _strict(SolverConfig, d["inner_solver"], "inner_solver")
    if "domain" in d:
        dom = dict(d["domain"])
        k = dom.pop("kind", "unconstrained")
        if k == "ball":
            d["domain"] = Domain.ball(dom.pop("center"), dom.pop("radius"))
        elif k == "box":
            d["domain"] = Domain.box(dom.pop("lo"), dom.pop("hi"))
        elif k == "unconstrained":
            d["domain"] = Domain.unconstrained()
        else:
            raise ConfigError(f"unknown domain kind {k!r}")
        if dom:
            raise ConfigError(f"unknown domain keys: {', '.join(sorted(dom))}")
    for key in ("seeds", "bounds"):
        if key in d:
            d[key] = tuple(d[key])
    try:
        return ExperimentConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


def preset(name: str, algo: Optional[str] = None, loss_kind: Optional[str] = None,
           rounds: Optional[int] = None) -> ExperimentConfig:
    if name == "gridworld_adversarial":
        env = GridworldSpec()
        cfg = ExperimentConfig(env=env, algo=algo or "FTL", loss_kind=loss_kind or "logistic",
                               total_interactions=100 * env.interactions_per_round,
                               inner_solver=SolverConfig(init_step=4.0), name=name)
    elif name == "gridworld_stationary":
        env = GridworldSpec(expert="stationary", loss_mode="expected")
        cfg = ExperimentConfig(env=env, algo=algo or "FTL", loss_kind=loss_kind or "squared",
                               total_interactions=100 * env.interactions_per_round,
                               inner_solver=SolverConfig(init_step=4.0),
                               bounds=("occupancy_constant",), name=name)
    elif name in ("toy_simple", "toy_adversarial"):
        regime = name.split("_")[1]
        kind = canonical_loss(loss_kind or "squared")
        env = envs.ToyStreamConfig(regime=regime, loss_kind=kind)
        cfg = ExperimentConfig(env=env, algo=algo or "FTL", loss_kind=kind,
                               total_interactions=env.rounds * env.samples_per_round, name=name)
    else:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    if rounds is not None:
        cfg = cfg.with_rounds(rounds)
    return cfg


# ---------------------------------------------------------------------------
# the interaction loop
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    rows: list
    bound_reports: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    complete: bool = True
    error: Optional[str] = None
    config: dict = field(default_factory=dict)
    ledger: Optional[metrics.RegretLedger] = field(default=None, repr=False)
    constants: dict = field(default_factory=dict)

    @property
    def rounds(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def metadata(self) -> dict:
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "rounds": self.rounds,
            "complete": self.complete,
            "error": self.error,
            "bound_reports": self.bound_reports,
            "constants": _jsonable(self.constants),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _toy_losses(cfg: ExperimentConfig, seed: int) -> list:
    toy = replace(cfg.env, seed=seed, loss_kind=cfg.loss_kind, delta=cfg.delta, rounds=cfg.rounds)
    return envs.toy_stream(toy)


def _measured_theorem2(cfg: ExperimentConfig, losses: Sequence[RoundLoss]) -> StepSchedule:
    """Tuned constant step from the stream's smoothness and interpolation error."""
    w_star, _ = metrics.hindsight(losses, cfg.domain, cfg.inner_solver)
    eps = sum(metrics.interpolation_error(l, w_star, cfg.domain, cfg.inner_solver) for l in losses)
    L = metrics.measure_constants(losses, cfg.domain)["L"]
    if L is None:
        raise ConfigError("the theorem2 schedule needs smooth losses")
    return StepSchedule.theorem2(L=L, eps_budget=eps)


def run(cfg: ExperimentConfig, seed: int, compute_regret: bool = True) -> RunRecord:
    """One seeded run of the online imitation loop; deterministic in ``(cfg, seed)``."""
    rec = RunRecord(config_hash=cfg.config_hash(), seed=int(seed), rows=[], config=cfg.to_dict())
    dom = cfg.domain
    T, M = cfg.rounds, cfg.interactions_per_round
    losses: list = []
    played: list = []
    rewards: list = []
    grads: list = []
    sigmas: list = []
    iterates: list = []
    try:
        pre = _toy_losses(cfg, seed) if not cfg.is_gridworld else None
        sched = cfg.resolved_schedule()
        if cfg.measured_schedule and sched.kind == "theorem2":
            if pre is None:
                raise ConfigError("measured theorem2 schedules need a toy stream")
            sched = _measured_theorem2(cfg, pre)
            rec.config["schedule"] = sched.to_dict()
        state = init_state(cfg.algo, cfg.dim(), schedule=sched, dom=dom)
        mdp = cfg.env.build(seed) if cfg.is_gridworld else None
        cum_loss = cum_reward = 0.0
        for t in range(1, T + 1):
            tic = time.perf_counter()
            w = state.w
            if mdp is not None:
                iterates.append(w.copy())
                batch = envs.rollout(mdp, w, t, cfg.env.episodes_per_round, seed, cfg.behavior)
                if cfg.env.loss_mode == "expected":
                    l = envs.expected_round_loss(mdp, w, t, cfg.loss_kind, cfg.delta, cfg.behavior)
                else:
                    l = envs.build_round_loss(batch, cfg.loss_kind, cfg.delta)
                r = float(batch.rewards.sum())
            else:
                l, r = pre[t - 1], 0.0
            lv = l.value(w)
            state = step(state, l, dom, cfg.inner_solver)
            info = state.last
            losses.append(l)
            played.append(lv)
            rewards.append(r)
            grads.append(info.grad_norm)
            sigmas.append(info.sigma)
            cum_loss += lv
            cum_reward += r
            rec.rows.append({
                "round": t,
                "env_steps": t * M,
                "loss": lv,
                "avg_cumulative_loss": cum_loss / t,
                "cumulative_regret": math.nan,
                "cumulative_reward": cum_reward,
                "eta_t": info.eta,
                "sigma_t": info.sigma,
                "inner_iters": info.inner_iters,
                "solver_converged": bool(info.converged),
            })
            rec.wall_clock.append(time.perf_counter() - tic)
            if not math.isfinite(lv):
                raise FloatingPointError(f"non-finite loss at round {t}")
    except Exception as exc:  # partial records are kept and flagged
        log.warning("run aborted at round %d: %s", len(rec.rows) + 1, exc)
        rec.complete = False
        rec.error = f"{type(exc).__name__}: {exc}"
        return rec

    if not compute_regret:
        return rec
    ledger = metrics.regret(played, losses, dom, cfg.inner_solver, per_round_reward=rewards,
                            with_interpolation=bool(cfg.bounds))
    ledger.solver_flags = np.array([row["solver_converged"] for row in rec.rows])
    ledger.grad_norms = np.array(grads)
    ledger.sigmas = np.array(sigmas)
    ledger.round_mu = metrics.round_strong_convexity(losses)
    ledger.algo = cfg.algo
    ledger.schedule = rec.config["schedule"]
    for row, R in zip(rec.rows, ledger.cumulative_regret):
        row["cumulative_regret"] = float(R)
    rec.ledger = ledger
    if cfg.bounds:
        extra = {}
        if mdp is not None:
            extra["gamma"] = mdp.gamma
            extra["realizable"] = cfg.env.expert == "stationary"
            extra["C"] = metrics.occupancy_constant(mdp, iterates, range(1, T + 1), cfg.loss_kind, cfg.delta)
        rec.constants = metrics.measure_constants(losses, dom, ledger, **extra)
        for b in cfg.bounds:
            try:
                rec.bound_reports.append(metrics.check_bound(b, ledger, rec.constants).to_dict())
            except metrics.HypothesisMismatch as exc:
                rec.bound_reports.append({"theorem": b, "refused": str(exc)})
    return rec


def _run_task(args):
    cfg, seed = args
    return run(cfg, seed)


def run_many(cfg: ExperimentConfig, seeds: Optional[Sequence[int]] = None, jobs: int = 1) -> list:
    seeds = list(cfg.seeds if seeds is None else seeds)
    if jobs <= 1 or len(seeds) <= 1:
        return [run(cfg, s) for s in seeds]
    with ProcessPoolExecutor(max_workers=min(jobs, len(seeds))) as pool:
        return list(pool.map(_run_task, [(cfg, s) for s in seeds]))


# ---------------------------------------------------------------------------
# tuning
# ---------------------------------------------------------------------------


def pilot_config(base: ExperimentConfig, pilot_interactions: int = 2000, pilot_M: int = 100) -> ExperimentConfig:
    """Short-budget copy of ``base`` for ranking step sizes.

    Toy streams take ``pilot_M`` samples per round; gridworld rounds have a
    fixed size, so only the number of rounds shrinks (never past the base).
    """
    if base.is_gridworld:
        rounds = max(1, min(base.rounds, pilot_interactions // base.interactions_per_round))
        return base.with_rounds(rounds)
    env = replace(base.env, samples_per_round=pilot_M)
    rounds = max(1, pilot_interactions // pilot_M)
    return replace(base, env=replace(env, rounds=rounds), interactions_per_round=pilot_M,
                   total_interactions=rounds * pilot_M)


def grid_search(base: ExperimentConfig, etas: Sequence[float] = DECADES, pilot_interactions: int = 2000,
                pilot_M: int = 100, seed: Optional[int] = None) -> list:
    """``[(eta, final average cumulative loss)]`` sorted best first; diverged pilots rank last."""
    if len(etas) == 0:
        raise ValueError("etas must be non-empty")
    seed = base.seeds[0] if seed is None else seed
    pilot = pilot_config(base, pilot_interactions, pilot_M)
    scored, failures = [], {}
    for eta in etas:
        rec = run(pilot.with_step(eta), seed, compute_regret=False)
        final = rec.rows[-1]["avg_cumulative_loss"] if rec.rows else math.nan
        if not rec.complete or not math.isfinite(final):
            failures[eta] = rec.error or "non-finite average loss"
            final = math.inf
        scored.append((float(eta), float(final)))
    if len(failures) == len(etas):
        detail = "; ".join(f"eta={e:g}: {msg}" for e, msg in failures.items())
        raise RuntimeError(f"every pilot diverged: {detail}")
    return sorted(scored, key=lambda p: p[1])


@dataclass
class TuneResult:
    ranking: list
    finalists: list
    best_eta: float
    config: ExperimentConfig

    def to_dict(self) -> dict:
        return {
            "ranking": [{"eta": e, "avg_cumulative_loss": v} for e, v in self.ranking],
            "finalists": [{"eta": e, "avg_cumulative_loss": v} for e, v in self.finalists],
            "best_eta": self.best_eta,
        }


def tune(base: ExperimentConfig, etas: Sequence[float] = DECADES, pilot_interactions: int = 2000,
         pilot_M: int = 100, seed: Optional[int] = None, top: int = 3) -> TuneResult:
    """Pilot every step size, re-run the best ``top`` at full budget, keep the best."""
    seed = base.seeds[0] if seed is None else seed
    ranking = grid_search(base, etas, pilot_interactions, pilot_M, seed)
    # a pilot at full budget already is the full run
    same_budget = pilot_config(base, pilot_interactions, pilot_M) == base
    finalists = []
    for eta, score in ranking[:top]:
        if same_budget:
            finalists.append((eta, score))
            continue
        rec = run(base.with_step(eta), seed, compute_regret=False)
        final = rec.rows[-1]["avg_cumulative_loss"] if rec.complete else math.inf
        finalists.append((eta, float(final) if math.isfinite(final) else math.inf))
    best = min(finalists, key=lambda p: p[1])[0]
    return TuneResult(ranking, finalists, best, base.with_step(best))
