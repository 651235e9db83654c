"""Regret accounting, best-in-hindsight solves and numeric checks of regret bounds."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import Domain, RoundLoss, _ball_lstsq, _l1_regression, stack_losses, weighted_lstsq, exact_min
from .solvers import Objective, SolveReport, SolverConfig, solve, stationarity

HINDSIGHT_TOL = 1e-10
REGRET_SLACK = 1e-9
EPS_CLAMP = 1e-10
DENSE_CHECKPOINT_LIMIT = 250
SPARSE_CHECKPOINTS = 50

FTRL_FAMILY = ("FTRL", "AltFTRL", "FTRLNaive")
SMOOTH_KINDS = ("squared", "huber", "logistic")


class HypothesisMismatch(ValueError):
    """The run does not satisfy the assumptions of the requested bound."""


@dataclass
class RegretLedger:
    per_round_loss: np.ndarray
    per_round_reward: np.ndarray
    hindsight_value: float
    hindsight_point: np.ndarray
    cumulative_regret: np.ndarray
    avg_cumulative_loss: np.ndarray
    interpolation_errors: Optional[np.ndarray] = None
    solver_flags: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    checkpoints: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    hindsight_converged: bool = True
    # per-round quantities some bounds need
    grad_norms: Optional[np.ndarray] = None
    sigmas: Optional[np.ndarray] = None
    round_mu: Optional[np.ndarray] = None
    algo: Optional[str] = None
    schedule: Optional[dict] = None

    @property
    def rounds(self) -> int:
        return int(self.per_round_loss.size)

    @property
    def final_regret(self) -> float:
        return float(self.cumulative_regret[-1])

    @property
    def eps_sq_sum(self) -> Optional[float]:
        if self.interpolation_errors is None:
            return None
        return float(np.sum(self.interpolation_errors))


@dataclass
class BoundReport:
    theorem: str
    lhs: float
    rhs: float
    constants: dict
    satisfied: bool
    notes: str = ""

    def to_dict(self) -> dict:
        return {
            "theorem": self.theorem,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "constants": {k: v for k, v in self.constants.items()},
            "satisfied": self.satisfied,
            "notes": self.notes,
        }


# ---------------------------------------------------------------------------
# best in hindsight
# ---------------------------------------------------------------------------


def _closed_form(losses: Sequence[RoundLoss], dom: Domain) -> Optional[np.ndarray]:
    kinds = {l.kind for l in losses}
    if kinds == {"squared"}:
        if dom.kind == "ball":
            return _ball_lstsq(stack_losses(losses)[0], dom)
        w = weighted_lstsq(losses)
        if not dom.bounded or dom.contains(w, tol=0.0):
            return w
        return None
    if kinds == {"absolute"}:
        stacked = stack_losses(losses)
        if len(stacked) == 1:
            return _l1_regression(stacked[0], dom)
    return None


def hindsight(losses: Sequence[RoundLoss], dom: Domain, solver: Optional[SolverConfig] = None,
              start=None, return_report: bool = False):
    """Minimizer and value of ``sum_t l_t`` over ``dom``.

    Least squares and L1 regression are solved directly (exactly on balls, and
    on boxes for L1). Otherwise the summed objective is minimized to
    gradient-mapping norm ``1e-10``; a non-converged solve is reported through
    ``return_report`` and the best point found is returned.
    """
    if len(losses) == 0:
        raise ValueError("hindsight needs at least one loss")
    w = _closed_form(losses, dom)
    if w is not None:
        val = float(sum(l.value(w) for l in losses))
        return (w, val, None) if return_report else (w, val)
    cfg = replace(solver or SolverConfig(), grad_tol=HINDSIGHT_TOL, method="armijo_gd")
    x0 = np.zeros(losses[0].dim) if start is None else np.asarray(start, dtype=np.float64)
    obj = Objective(losses)
    if dom.kind in ("unconstrained", "box"):
        rep = _lbfgs(obj, dom, dom.project(x0), cfg)
    else:
        rep = solve(obj, dom, x0, cfg)
    if return_report:
        return rep.solution, rep.objective_value, rep
    return rep.solution, rep.objective_value


def _lbfgs(obj: Objective, dom: Domain, x0: np.ndarray, cfg: SolverConfig) -> SolveReport:
    from scipy.optimize import minimize

    bounds = list(zip(dom.lo, dom.hi)) if dom.kind == "box" else None
    res = minimize(obj.value_and_grad, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": 10 * cfg.max_iters, "gtol": 0.1 * cfg.grad_tol, "ftol": 0.0,
                            "maxcor": 20})
    w = np.asarray(res.x)
    f, g = obj.value_and_grad(w)
    gn = stationarity(dom, w, g)
    return SolveReport(solution=w, final_grad_norm=gn, iters_used=int(res.nit),
                       converged=gn <= cfg.grad_tol, objective_value=f)


def default_checkpoints(T: int) -> np.ndarray:
    """Rounds at which cumulative regret is re-solved (1-based)."""
    if T <= DENSE_CHECKPOINT_LIMIT:
        return np.arange(1, T + 1)
    pts = np.unique(np.round(np.geomspace(1, T, SPARSE_CHECKPOINTS)).astype(int))
    return np.union1d(pts, [T])


def regret(per_round_loss, losses: Sequence[RoundLoss], dom: Domain,
           solver: Optional[SolverConfig] = None, checkpoints=None, per_round_reward=None,
           with_interpolation: bool = False) -> RegretLedger:
    """Cumulative regret at each checkpoint; ``nan`` elsewhere."""
    played = np.asarray(per_round_loss, dtype=np.float64)
    T = played.size
    if len(losses) != T:
        raise ValueError(f"{T} played losses but {len(losses)} round losses")
    if T == 0:
        raise ValueError("empty run")
    cps = default_checkpoints(T) if checkpoints is None else np.asarray(sorted(set(checkpoints)), dtype=int)
    if cps[0] < 1 or cps[-1] > T:
        raise ValueError("checkpoints must lie in [1, T]")
    cum = np.cumsum(played)
    out = np.full(T, np.nan)
    warm = None
    all_converged = True
    w_star, v_star = None, None
    for c in cps:
        w_star, v_star, rep = hindsight(losses[:c], dom, solver, start=warm, return_report=True)
        if rep is not None and not rep.converged:
            all_converged = False
        warm = w_star
        out[c - 1] = cum[c - 1] - v_star
    if cps[-1] != T:
        w_star, v_star, rep = hindsight(losses, dom, solver, start=warm, return_report=True)
        if rep is not None and not rep.converged:
            all_converged = False
    eps = None
    if with_interpolation:
        eps = np.array([interpolation_error(l, w_star, dom, solver) for l in losses])
    reward = np.zeros(T) if per_round_reward is None else np.asarray(per_round_reward, dtype=np.float64)
    return RegretLedger(
        per_round_loss=played,
        per_round_reward=reward,
        hindsight_value=float(v_star),
        hindsight_point=w_star,
        cumulative_regret=out,
        avg_cumulative_loss=cum / np.arange(1, T + 1),
        interpolation_errors=eps,
        checkpoints=cps,
        hindsight_converged=all_converged,
    )


def interpolation_error(l: RoundLoss, hindsight_point, dom: Domain,
                        solver: Optional[SolverConfig] = None) -> float:
    """``l(w*) - min l`` with the hindsight point standing in for the optimal set."""
    _, best = exact_min(l, dom, replace(solver, grad_tol=HINDSIGHT_TOL) if solver else None)
    gap = l.value(hindsight_point) - best
    if gap < -EPS_CLAMP:
        # the per-round solve did worse than a feasible point: trust the point
        return 0.0
    return max(0.0, gap)


# ---------------------------------------------------------------------------
# problem constants
# ---------------------------------------------------------------------------


def measure_constants(losses: Sequence[RoundLoss], dom: Domain, ledger: Optional[RegretLedger] = None,
                      **extra) -> dict:
    """Analytic per-round constants: worst case over the stream.

    ``L`` is ``None`` when some loss is non-smooth and ``G`` is ``None`` when
    some loss has unbounded gradients on ``dom``.
    """
    metas = [l.meta_constants(dom) for l in losses]
    Ls = [m.smoothness_L for m in metas]
    Gs = [m.lipschitz_G for m in metas]
    out = {
        "D": dom.diameter,
        "L": None if any(v is None for v in Ls) else float(max(Ls)),
        "mu": float(min(m.strong_convexity_mu for m in metas)),
        "G": None if any(v is None for v in Gs) else float(max(Gs)),
        "T": len(losses),
        "kinds": sorted({l.kind for l in losses}),
    }
    if ledger is not None:
        out["eps_sq_sum"] = ledger.eps_sq_sum
    out.update(extra)
    return out


def round_strong_convexity(losses: Sequence[RoundLoss]) -> np.ndarray:
    return np.array([l.meta_constants().strong_convexity_mu for l in losses])


# ---------------------------------------------------------------------------
# bound checkers
# ---------------------------------------------------------------------------


def _need(cond: bool, msg: str):
    if not cond:
        raise HypothesisMismatch(msg)


def _bounded(c: dict):
    _need(c.get("D") is not None and math.isfinite(c["D"]), "bound needs a bounded domain")


def _smooth(c: dict):
    _need(c.get("L") is not None and c["L"] > 0, "bound needs L-smooth losses")
    _need(set(c.get("kinds", [])) <= set(SMOOTH_KINDS), "bound needs smooth non-negative losses")


def _lipschitz(c: dict):
    _need(c.get("G") is not None and math.isfinite(c["G"]), "bound needs Lipschitz losses on the domain")


def _algo(ledger: RegretLedger, allowed):
    _need(ledger.algo in allowed, f"bound holds for {', '.join(allowed)}, run used {ledger.algo}")


def _sched(ledger: RegretLedger, kind: str) -> dict:
    s = ledger.schedule or {}
    _need(s.get("kind") == kind, f"bound needs a {kind} schedule, run used {s.get('kind')}")
    return s


def _eps(ledger: RegretLedger, c: dict) -> float:
    e = c.get("eps_sq_sum", ledger.eps_sq_sum)
    _need(e is not None, "bound needs interpolation errors")
    return float(e)


def _rhs_ftrl_smooth(ledger, c):
    _algo(ledger, FTRL_FAMILY)
    _bounded(c)
    _smooth(c)
    s = _sched(ledger, "theorem2")
    E2 = _eps(ledger, c)
    L, D = c["L"], c["D"]
    _need(math.isclose(s["L"], L, rel_tol=1e-9), f"schedule L={s['L']} differs from measured L={L}")
    _need(math.isclose(s["eps_budget"], E2, rel_tol=1e-6, abs_tol=1e-12),
          f"schedule eps budget {s['eps_budget']} differs from measured {E2}")
    return 2 * D**2 * L + (D**2 + 2 * L) * math.sqrt(E2), {"eps_sq_sum": E2}


def _ada_scale(alpha: float, D: float) -> float:
    return alpha / 2 + D**2 / (2 * alpha)


def _rhs_adaftrl_smooth(ledger, c):
    _algo(ledger, ("AdaFTRL",))
    _bounded(c)
    _smooth(c)
    alpha = _sched(ledger, "adaptive_grad_norm")["alpha"]
    E2 = _eps(ledger, c)
    k = _ada_scale(alpha, c["D"])
    L = c["L"]
    return 2 * L * k**2 + math.sqrt(2 * L) * k * math.sqrt(E2), {"alpha": alpha, "eps_sq_sum": E2}


def _rhs_ftrl_lipschitz(ledger, c):
    _algo(ledger, FTRL_FAMILY)
    _bounded(c)
    _lipschitz(c)
    alpha = _sched(ledger, "inverse_sqrt_t")["alpha"]
    T, G, D = ledger.rounds, c["G"], c["D"]
    return math.sqrt(T) / 2 * (G**2 * alpha + D**2 / alpha), {"alpha": alpha}


def _rhs_adaftrl_lipschitz(ledger, c):
    _algo(ledger, ("AdaFTRL",))
    _bounded(c)
    _lipschitz(c)
    alpha = _sched(ledger, "adaptive_grad_norm")["alpha"]
    return _ada_scale(alpha, c["D"]) * c["G"] * math.sqrt(ledger.rounds), {"alpha": alpha}


def _strongly_convex(c: dict):
    _need(c.get("mu") is not None and c["mu"] > 0, "bound needs strongly convex losses")


def _rhs_ftl_sc_smooth(ledger, c):
    _algo(ledger, ("FTL",))
    _bounded(c)
    _strongly_convex(c)
    _need(c.get("L") is not None, "bound needs smooth losses")
    return c["D"] * c["L"] / c["mu"] * (1 + math.log(ledger.rounds)), {}


def _rhs_ftl_sc_lipschitz(ledger, c):
    _algo(ledger, ("FTL",))
    _bounded(c)
    _strongly_convex(c)
    _lipschitz(c)
    return c["G"] ** 2 / (2 * c["mu"]) * (1 + math.log(ledger.rounds)), {}


def _rhs_gradient_sum(ledger, c):
    _algo(ledger, ("FTL", "AdaFTRL") + FTRL_FAMILY)
    _bounded(c)
    _need(ledger.grad_norms is not None and ledger.sigmas is not None and ledger.round_mu is not None,
          "bound needs per-round gradient norms, sigmas and strong convexity")
    g2 = np.asarray(ledger.grad_norms) ** 2
    denom = np.cumsum(np.asarray(ledger.sigmas) + np.asarray(ledger.round_mu))
    _need(bool(np.all(denom > 0)), "bound needs positive regularization plus curvature every round")
    rhs = float(np.sum(g2 / (2 * denom)) + c["D"] ** 2 / 2 * np.sum(ledger.sigmas))
    return rhs, {"sigma_sum": float(np.sum(ledger.sigmas))}


def _rhs_occupancy(ledger, c):
    _algo(ledger, ("FTL",))
    _need(c.get("C") is not None and c.get("gamma") is not None,
          "bound needs the tabular divergence constant C and a discount")
    _need(bool(c.get("realizable", False)), "bound needs a realizable expert")
    return c["C"] / (1 - c["gamma"]), {}


BOUNDS = {
    "occupancy_constant": _rhs_occupancy,
    "ftrl_smooth": _rhs_ftrl_smooth,
    "adaftrl_smooth": _rhs_adaftrl_smooth,
    "ftrl_lipschitz": _rhs_ftrl_lipschitz,
    "adaftrl_lipschitz": _rhs_adaftrl_lipschitz,
    "ftl_sc_smooth": _rhs_ftl_sc_smooth,
    "ftl_sc_lipschitz": _rhs_ftl_sc_lipschitz,
    "ftrl_gradient_sum": _rhs_gradient_sum,
}


def check_bound(theorem: str, ledger: RegretLedger, constants: dict) -> BoundReport:
    """Compare the run's final regret against the bound's right-hand side.

    Raises :class:`HypothesisMismatch` when the run does not meet the
    bound's assumptions; a violated bound is reported, not raised.
    """
    try:
        rhs_fn = BOUNDS[theorem]
    except KeyError:
        raise ValueError(f"unknown bound {theorem!r}; choose from {', '.join(BOUNDS)}") from None
    rhs, used = rhs_fn(ledger, constants)
    lhs = ledger.final_regret
    consts = {k: v for k, v in constants.items() if k in ("D", "L", "mu", "G", "gamma", "C", "T")}
    consts.update(used)
    notes = ""
    if theorem == "occupancy_constant":
        notes = "max over steps truncated at the episode horizon"
    return BoundReport(
        theorem=theorem,
        lhs=lhs,
        rhs=float(rhs),
        constants=consts,
        satisfied=bool(lhs <= rhs * (1 + REGRET_SLACK)),
        notes=notes,
    )


# ---------------------------------------------------------------------------
# inequality probes
# ---------------------------------------------------------------------------


def adagrad_inequality_probe(grad_norms) -> tuple[float, float, float]:
    """``(sum g_t^2 / sqrt(sum_{i<=t} g_i^2), 2 sqrt(sum g^2), lhs / sqrt(sum g^2))``."""
    g = np.asarray(grad_norms, dtype=np.float64)
    if np.any(g < 0):
        raise ValueError("gradient norms must be non-negative")
    g2 = g**2
    total = float(g2.sum())
    if total == 0.0:
        return 0.0, 0.0, 0.0
    run = np.cumsum(g2)
    mask = run > 0
    lhs = float(np.sum(g2[mask] / np.sqrt(run[mask])))
    rhs2x = 2.0 * math.sqrt(total)
    if lhs > rhs2x * (1 + 1e-12):
        raise ArithmeticError(f"adagrad inequality violated: {lhs} > {rhs2x}")
    return lhs, rhs2x, lhs / math.sqrt(total)


def quadratic_root_probe(n: int = 10_000, seed: int = 0, scale: float = 10.0) -> dict:
    """Draw ``a, b >= 0`` and ``x`` with ``x^2 <= a (x + b)``; check ``x <= a + sqrt(a b)``."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, scale, n)
    b = rng.uniform(0, scale, n)
    disc = np.sqrt(a**2 + 4 * a * b)
    lo, hi = (a - disc) / 2, (a + disc) / 2
    x = rng.uniform(lo, hi)
    # include the upper root itself, the tightest admissible point
    x[: n // 10] = hi[: n // 10]
    premise = x**2 <= a * (x + b) + 1e-9 * (1 + a * (np.abs(x) + b))
    bound = a + np.sqrt(a * b)
    holds = x <= bound + 1e-12 * (1 + bound)
    return {
        "draws": int(n),
        "premise_held": int(premise.sum()),
        "violations": int(np.sum(premise & ~holds)),
        "min_slack": float(np.min(bound - x)),
    }


def occupancy_constant(mdp, iterates: Sequence[np.ndarray], rounds: Sequence[int], kind: str = "squared",
                       delta: float = 1.0) -> float:
    """Largest expected per-step divergence over the played policies."""
    from .envs import expected_divergence

    best = 0.0
    for w, t in zip(iterates, rounds):
        best = max(best, float(np.max(expected_divergence(mdp, w, t, kind=kind, delta=delta))))
    return best
