"""Online learners: OGD, scalar AdaGrad, FTL, FTRL, Alt-FTRL, AdaFTRL and naive FTRL.

Every learner keeps an :class:`OptimizerState` and advances it by one round
with ``step(state, loss, dom, solver)``. Regularization strengths are tracked
through the inverse step size ``1/eta_t = sum_{i<=t} sigma_i``; FTL is the
special case ``1/eta_t = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import Domain, DomainError, RoundLoss, param_vector
from .solvers import Objective, SolveReport, SolverConfig, solve

ALGOS = ("OGD", "AdaGrad", "FTL", "FTRL", "AltFTRL", "AdaFTRL", "FTRLNaive")
SCHEDULE_KINDS = ("constant", "inverse_sqrt_t", "adaptive_grad_norm", "theorem2")
ACC_FLOOR = 1e-12

_ALIASES = {a.lower(): a for a in ALGOS}
_ALIASES.update({"alt_ftrl": "AltFTRL", "ada_ftrl": "AdaFTRL", "ftrl_naive": "FTRLNaive", "bc": "FTL"})


def canonical_algo(name: str) -> str:
    try:
        return _ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown algorithm {name!r}; choose from {', '.join(ALGOS)}") from None


@dataclass
class StepSchedule:
    """Step-size rule ``eta_t``.

    ``constant``: ``eta``. ``inverse_sqrt_t``: ``alpha / sqrt(t)``.
    ``adaptive_grad_norm``: ``alpha / sqrt(sum_{i<=t} ||g_i||^2)``.
    ``theorem2``: ``min((sum eps_t^2)^(-1/2), 1/(2L))`` for every round.
    """

    kind: str = "constant"
    eta: float = 1.0
    alpha: float = 1.0
    L: float = 1.0
    eps_budget: float = 0.0
    grad_sq_sum: float = 0.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "constant" and not self.eta > 0:
            raise ValueError("constant schedule needs eta > 0")
        if self.kind in ("inverse_sqrt_t", "adaptive_grad_norm") and not self.alpha > 0:
            raise ValueError("schedule needs alpha > 0")
        if self.kind == "theorem2" and (self.L <= 0 or self.eps_budget < 0):
            raise ValueError("theorem2 schedule needs L > 0 and eps_budget >= 0")

    @classmethod
    def constant(cls, eta: float) -> "StepSchedule":
        return cls(kind="constant", eta=eta)

    @classmethod
    def inverse_sqrt_t(cls, alpha: float) -> "StepSchedule":
        return cls(kind="inverse_sqrt_t", alpha=alpha)

    @classmethod
    def adaptive(cls, alpha: float) -> "StepSchedule":
        return cls(kind="adaptive_grad_norm", alpha=alpha)

    @classmethod
    def theorem2(cls, L: float, eps_budget: float) -> "StepSchedule":
        return cls(kind="theorem2", L=L, eps_budget=eps_budget)

    def observe(self, grad_sq: float) -> None:
        self.grad_sq_sum += grad_sq

    def inv_eta(self, t: int) -> float:
        """``1/eta_t`` for round ``t >= 1``; ``0`` means no regularization."""
        if t <= 0:
            return 0.0
        if self.kind == "constant":
            return 0.0 if math.isinf(self.eta) else 1.0 / self.eta
        if self.kind == "inverse_sqrt_t":
            return math.sqrt(t) / self.alpha
        if self.kind == "adaptive_grad_norm":
            return math.sqrt(max(self.grad_sq_sum, ACC_FLOOR)) / self.alpha
        eta = 1.0 / (2.0 * self.L)
        if self.eps_budget > 0:
            eta = min(eta, self.eps_budget ** -0.5)
        return 1.0 / eta

    def step_size(self, t: int) -> float:
        inv = self.inv_eta(t)
        return math.inf if inv == 0 else 1.0 / inv

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "constant":
            d["eta"] = self.eta
        elif self.kind in ("inverse_sqrt_t", "adaptive_grad_norm"):
            d["alpha"] = self.alpha
        else:
            d.update(L=self.L, eps_budget=self.eps_budget)
        return d


@dataclass
class RoundInfo:
    eta: float
    sigma: float
    grad_norm: float
    inner_iters: int = 0
    converged: bool = True
    final_grad_norm: float = 0.0


@dataclass
class OptimizerState:
    algo: str
    w: np.ndarray
    schedule: StepSchedule
    round: int = 0
    history: list = field(default_factory=list)
    grad_carry: Optional[np.ndarray] = None
    weight_carry: Optional[np.ndarray] = None
    iterate_history: list = field(default_factory=list)
    sigma_history: list = field(default_factory=list)
    inv_eta_prev: float = 0.0
    last: Optional[RoundInfo] = None

    @property
    def dim(self) -> int:
        return self.w.size


def init_state(algo: str, dim: int, schedule: Optional[StepSchedule] = None, w0=None,
               dom: Optional[Domain] = None) -> OptimizerState:
    algo = canonical_algo(algo)
    w = np.zeros(dim) if w0 is None else param_vector(w0)
    if dom is not None:
        w = dom.project(w)
    if schedule is None:
        schedule = default_schedule(algo, dom)
    if algo == "FTL":
        schedule = StepSchedule.constant(math.inf)
    if algo in ("AdaFTRL", "AdaGrad") and schedule.kind != "adaptive_grad_norm":
        raise ValueError(f"{algo} requires the adaptive_grad_norm schedule")
    if algo in ("FTRL",) and schedule.kind == "adaptive_grad_norm":
        raise ValueError("use AdaFTRL for the adaptive schedule")
    st = OptimizerState(algo=algo, w=w, schedule=schedule)
    if algo == "AltFTRL":
        st.weight_carry = np.zeros(dim)
    return st


def default_schedule(algo: str, dom: Optional[Domain] = None) -> StepSchedule:
    alpha = dom.diameter if dom is not None and dom.bounded else 1.0
    if algo in ("AdaGrad", "AdaFTRL"):
        return StepSchedule.adaptive(alpha)
    if algo == "OGD":
        return StepSchedule.constant(1.0)
    if algo == "FTL":
        return StepSchedule.constant(math.inf)
    return StepSchedule.inverse_sqrt_t(1.0)


def _finite_grad(l: RoundLoss, w: np.ndarray) -> np.ndarray:
    g = l.gradient(w)
    if not np.all(np.isfinite(g)):
        raise DomainError(f"non-finite gradient at round input (norm of w = {np.linalg.norm(w):.3g})")
    return g


# -- first-order (linearized) learners ---------------------------------------


def ogd_step(s: OptimizerState, l: RoundLoss, dom: Domain) -> OptimizerState:
    if s.algo not in ("OGD", "AdaGrad"):
        raise ValueError(f"ogd_step called on {s.algo} state")
    g = _finite_grad(l, s.w)
    gsq = float(g @ g)
    s.schedule.observe(gsq)
    s.round += 1
    inv = s.schedule.inv_eta(s.round)
    eta = 1.0 / inv
    s.w = dom.project(s.w - eta * g)
    s.last = RoundInfo(eta=eta, sigma=inv - s.inv_eta_prev, grad_norm=math.sqrt(gsq))
    s.inv_eta_prev = inv
    return s


def adagrad_step(s: OptimizerState, l: RoundLoss, dom: Domain) -> OptimizerState:
    if s.algo != "AdaGrad":
        raise ValueError(f"adagrad_step called on {s.algo} state")
    return ogd_step(s, l, dom)


# -- follow-the-leader family -------------------------------------------------


def _finish(s: OptimizerState, rep: SolveReport, inv: float, gnorm: float) -> OptimizerState:
    s.w = rep.solution
    s.last = RoundInfo(
        eta=math.inf if inv == 0 else 1.0 / inv,
        sigma=inv - s.inv_eta_prev,
        grad_norm=gnorm,
        inner_iters=rep.iters_used,
        converged=rep.converged,
        final_grad_norm=rep.final_grad_norm,
    )
    s.inv_eta_prev = inv
    return s


def _advance(s: OptimizerState, l: RoundLoss) -> tuple[float, float]:
    """Append ``l``, update the schedule with ``||grad l(w_t)||^2``; return (1/eta_t, ||g||)."""
    g = _finite_grad(l, s.w)
    gsq = float(g @ g)
    s.history.append(l)
    s.schedule.observe(gsq)
    s.round += 1
    return s.schedule.inv_eta(s.round), math.sqrt(gsq)


def ftl_step(s: OptimizerState, l: RoundLoss, dom: Domain, solver: SolverConfig = SolverConfig()) -> OptimizerState:
    if s.algo != "FTL":
        raise ValueError(f"ftl_step called on {s.algo} state")
    _, gnorm = _advance(s, l)
    rep = solve(Objective(s.history), dom, s.w, solver)
    return _finish(s, rep, 0.0, gnorm)


def ftrl_step(s: OptimizerState, l: RoundLoss, dom: Domain, solver: SolverConfig = SolverConfig()) -> OptimizerState:
    """Gradient-anchored FTRL: only past losses are stored, never past iterates."""
    if s.algo not in ("FTRL", "AdaFTRL"):
        raise ValueError(f"ftrl_step called on {s.algo} state")
    past = list(s.history)
    inv, gnorm = _advance(s, l)
    # the anchor point moves every round, so the sum is re-evaluated at w_t
    anchor = np.zeros_like(s.w)
    for li in past:
        anchor += li.gradient(s.w)
    s.grad_carry = anchor
    rep = solve(Objective(s.history, linear=anchor, prox=[(inv, s.w)]), dom, s.w, solver)
    return _finish(s, rep, inv, gnorm)


def alt_ftrl_step(s: OptimizerState, l: RoundLoss, dom: Domain, solver: SolverConfig = SolverConfig()) -> OptimizerState:
    """Iterate-averaging FTRL: carries ``sum_i sigma_i w_i`` instead of the iterates."""
    if s.algo != "AltFTRL":
        raise ValueError(f"alt_ftrl_step called on {s.algo} state")
    inv, gnorm = _advance(s, l)
    s.weight_carry = s.weight_carry + s.w * (inv - s.inv_eta_prev)
    rep = solve(
        Objective(s.history, linear=s.weight_carry, prox=[(inv, np.zeros_like(s.w))]),
        dom, s.w, solver,
    )
    return _finish(s, rep, inv, gnorm)


def ftrl_naive_step(s: OptimizerState, l: RoundLoss, dom: Domain, solver: SolverConfig = SolverConfig(),
                    sigma_override: Optional[float] = None) -> OptimizerState:
    """Reference FTRL that keeps every iterate and its regularization weight."""
    if s.algo != "FTRLNaive":
        raise ValueError(f"ftrl_naive_step called on {s.algo} state")
    inv, gnorm = _advance(s, l)
    sigma = inv - s.inv_eta_prev if sigma_override is None else sigma_override
    s.iterate_history.append(s.w.copy())
    s.sigma_history.append(sigma)
    prox = list(zip(s.sigma_history, s.iterate_history))
    rep = solve(Objective(s.history, prox=prox), dom, s.w, solver)
    return _finish(s, rep, inv, gnorm)


_STEPS = {
    "OGD": lambda s, l, dom, solver: ogd_step(s, l, dom),
    "AdaGrad": lambda s, l, dom, solver: adagrad_step(s, l, dom),
    "FTL": ftl_step,
    "FTRL": ftrl_step,
    "AdaFTRL": ftrl_step,
    "AltFTRL": alt_ftrl_step,
    "FTRLNaive": ftrl_naive_step,
}


def step(s: OptimizerState, l: RoundLoss, dom: Domain, solver: SolverConfig = SolverConfig()) -> OptimizerState:
    return _STEPS[s.algo](s, l, dom, solver)


def stored_sizes(s: OptimizerState) -> dict:
    """How much each kind of history the state is holding."""
    return {
        "losses": len(s.history),
        "iterates": len(s.iterate_history),
        "sigmas": len(s.sigma_history),
    }
