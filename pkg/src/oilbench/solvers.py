"""Inner solvers for the argmin subproblems of FTL and the FTRL variants.

The objective is always of the form::

    F(w) = sum_i l_i(w) - <w, linear> + sum_j (c_j / 2) ||w - a_j||^2

which covers FTL (no extra terms), the gradient-anchored FTRL update (one
linear term and one prox term), the iterate-averaging variant (one linear term
and a prox term centred at zero) and the naive update (one prox term per round).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Domain, RoundLoss, l1_rows, stack_losses

METHODS = ("armijo_gd", "prox_sgd", "sls_sgd", "l1_exact")
L1_CHECK_EVERY = 25
L1_MAX_ITERS = 20_000
L1_ACTIVE_TOLS = (1e-10, 1e-8, 1e-6, 1e-4)
STEP_FLOOR = 1e-20
ROUNDOFF = 1e-12


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 1000
    grad_tol: float = 1e-8
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    init_step: float = 1.0
    method: str = "armijo_gd"
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if not 0 < self.armijo_c < 1:
            raise ValueError("armijo_c must lie in (0, 1)")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError("backtrack_factor must lie in (0, 1)")
        if not self.init_step > 0:
            raise ValueError("init_step must be positive")
        if self.method not in METHODS:
            raise ValueError(f"unknown solver method {self.method!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SolveReport:
    solution: np.ndarray
    final_grad_norm: float
    iters_used: int
    converged: bool
    objective_value: float
    epochs: int = 0
    step_underflow: bool = False
    history: list = field(default_factory=list, repr=False)


class Objective:
    """Sum of losses plus optional linear and quadratic proximal terms."""

    def __init__(
        self,
        losses: Sequence[RoundLoss],
        linear: Optional[np.ndarray] = None,
        prox: Sequence[tuple] = (),
    ):
        self.losses = list(losses)
        self._stacked = stack_losses(self.losses)
        self.linear = None if linear is None else np.asarray(linear, dtype=np.float64)
        self.prox = [(float(c), np.asarray(a, dtype=np.float64)) for c, a in prox if c != 0.0]
        # sum_j c_j/2 ||w - a_j||^2 = C/2 ||w - abar||^2 + K
        self.prox_coef = sum(c for c, _ in self.prox)
        if self.prox_coef != 0:
            self.prox_center = sum(c * a for c, a in self.prox) / self.prox_coef
            self._prox_const = sum(0.5 * c * float((a - self.prox_center) @ (a - self.prox_center))
                                   for c, a in self.prox)
        else:
            self.prox_center = None
            self._prox_const = 0.0

    def value_and_grad(self, w: np.ndarray, need_grad: bool = True):
        w = np.asarray(w, dtype=np.float64)
        if not np.all(np.isfinite(w)):
            raise ValueError("objective evaluated at a non-finite point")
        val = 0.0
        grad = None
        for l in self._stacked:
            v, g = l._evaluate(w, need_grad)
            val += v
            if need_grad:
                grad = g if grad is None else grad + g
        if need_grad and grad is None:
            grad = np.zeros_like(w)
        if self.linear is not None:
            val -= float(w @ self.linear)
            if need_grad:
                grad = grad - self.linear
        if self.prox_center is not None:
            d = w - self.prox_center
            val += 0.5 * self.prox_coef * float(d @ d) + self._prox_const
            if need_grad:
                grad = grad + self.prox_coef * d
        return val, grad

    def value(self, w: np.ndarray) -> float:
        return self.value_and_grad(w, need_grad=False)[0]

    def gradient(self, w: np.ndarray) -> np.ndarray:
        return self.value_and_grad(w)[1]

    def sampled_value_and_grad(self, i: int, w: np.ndarray):
        """``t * l_i(w) - <w, linear>``: unbiased for the smooth part when ``i`` is uniform."""
        t = len(self.losses)
        v, g = self.losses[i].value_and_grad(w)
        v, g = t * v, t * g
        if self.linear is not None:
            v -= float(w @ self.linear)
            g = g - self.linear
        return v, g


def stationarity(dom: Domain, w: np.ndarray, g: np.ndarray) -> float:
    """Gradient-mapping norm; equals ``||g||`` at interior points."""
    if not dom.bounded:
        return float(np.linalg.norm(g))
    return float(np.linalg.norm(w - dom.project(w - g)))


def prox_step(w, anchor, step: float, eta: float, dom: Domain) -> np.ndarray:
    """Closed-form prox of ``(1/2 eta)||. - anchor||^2`` with step size ``step``."""
    w = np.asarray(w, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    ratio = step / eta
    if math.isinf(ratio):
        return dom.project(anchor)
    return dom.project((w + ratio * anchor) / (1.0 + ratio))


def solve(objective: Objective, dom: Domain, start, cfg: SolverConfig = SolverConfig(),
          record_history: bool = False) -> SolveReport:
    start = dom.project(np.asarray(start, dtype=np.float64))
    if not np.all(np.isfinite(start)):
        raise ValueError("solver start point must be finite")
    if cfg.method == "armijo_gd":
        return _armijo_gd(objective, dom, start, cfg, record_history)
    if cfg.method == "l1_exact":
        return _l1_exact(objective, dom, start, cfg)
    return _stochastic(objective, dom, start, cfg, record_history)


def _armijo_gd(obj: Objective, dom: Domain, w: np.ndarray, cfg: SolverConfig, record: bool):
    f, g = obj.value_and_grad(w)
    hist = [f] if record else []
    gn = stationarity(dom, w, g)
    it = 0
    underflow = False
    while gn > cfg.grad_tol and it < cfg.max_iters:
        s = cfg.init_step
        g_new = None
        while True:
            w_new = dom.project(w - s * g)
            step = w_new - w
            sq = float(step @ step)
            # the gradient is reused as the next iterate's when the step is accepted
            f_new, g_new = obj.value_and_grad(w_new)
            band = ROUNDOFF * (1.0 + abs(f))
            # reduces to f - c s ||g||^2 when the projection is inactive
            if f_new <= f - (cfg.armijo_c / s) * sq and f - f_new > band:
                break
            if abs(f_new - f) <= band:
                # change is below the resolution of f: use the slope form of
                # the same condition (identical to Armijo on quadratics)
                if float(g_new @ step) <= (1.0 - 2.0 * cfg.armijo_c) * sq / s:
                    break
            g_new = None
            s *= cfg.backtrack_factor
            if s < STEP_FLOOR:
                underflow = True
                break
        if underflow:
            break
        it += 1
        w = w_new
        if g_new is None:
            f, g = obj.value_and_grad(w)
        else:
            f, g = f_new, g_new
        gn = stationarity(dom, w, g)
        if record:
            hist.append(f)
    return SolveReport(
        solution=w,
        final_grad_norm=gn,
        iters_used=it,
        converged=gn <= cfg.grad_tol,
        objective_value=f,
        step_underflow=underflow,
        history=hist,
    )


def _stochastic(obj: Objective, dom: Domain, w: np.ndarray, cfg: SolverConfig, record: bool):
    """Proximal SGD over the retained losses, one epoch = ``t`` sampled steps.

    ``prox_sgd`` uses the fixed per-component step ``init_step / t``; ``sls_sgd``
    backtracks on the sampled function starting from ``init_step``.
    """
    t = len(obj.losses)
    rng = np.random.default_rng(cfg.rng_seed)
    C, a = obj.prox_coef, obj.prox_center
    f, g = obj.value_and_grad(w)
    gn = stationarity(dom, w, g)
    hist = [f] if record else []
    it = epochs = 0
    underflow = False
    if t == 0:
        # only linear/prox terms: the prox of the linear step is exact
        return _armijo_gd(obj, dom, w, cfg, record)
    while gn > cfg.grad_tol and it < cfg.max_iters:
        for _ in range(t):
            i = int(rng.integers(t))
            fi, gi = obj.sampled_value_and_grad(i, w)
            if cfg.method == "prox_sgd":
                s = cfg.init_step / t
                u = w - s * gi
            else:
                s = cfg.init_step
                gsq = float(gi @ gi)
                while True:
                    u = w - s * gi
                    fu = obj.sampled_value_and_grad(i, u)[0]
                    if fu <= fi - cfg.armijo_c * s * gsq:
                        break
                    s *= cfg.backtrack_factor
                    if s < STEP_FLOOR:
                        underflow = True
                        u = w
                        break
            w = prox_step(u, a, s, 1.0 / C, dom) if C > 0 else dom.project(u)
            it += 1
            if it >= cfg.max_iters:
                break
        epochs += 1
        f, g = obj.value_and_grad(w)
        if not np.isfinite(f):
            break
        gn = stationarity(dom, w, g)
        if record:
            hist.append(f)
    return SolveReport(
        solution=w,
        final_grad_norm=gn,
        iters_used=it,
        converged=gn <= cfg.grad_tol,
        objective_value=f,
        epochs=epochs,
        step_underflow=underflow,
        history=hist,
    )


# ---------------------------------------------------------------------------
# exact solve for absolute losses plus a proximal term
# ---------------------------------------------------------------------------


def _l1_exact(obj: Objective, dom: Domain, w: np.ndarray, cfg: SolverConfig) -> SolveReport:
    """Exact minimizer of ``sum_j om_j |a_j.w - b_j| + (rho/2)||w - z||^2`` on a ball or R^d.

    The residual signs are read off an accelerated projected-gradient solve of
    the box-constrained dual; the piece they select is then minimized in
    closed form and accepted only if it passes the KKT check. Balls are handled
    by a root search on the multiplier of the norm constraint. Anything that
    cannot be certified falls back to :func:`_armijo_gd`.
    """
    problem = _l1_problem(obj)
    if problem is None or dom.kind == "box":
        raise ValueError("l1_exact needs absolute losses, a positive proximal weight and a ball or no constraint")
    A, b, om, rho, z = problem
    sol, iters = _l1_prox(A, b, om, rho, z, A @ w - b)
    if sol is not None and dom.kind == "ball" and np.linalg.norm(sol - dom.center) > dom.radius:
        sol, iters = _l1_prox_ball(A, b, om, rho, z, dom, iters)
    if sol is None:
        rep = _armijo_gd(obj, dom, w, cfg, False)
        rep.iters_used += iters
        return rep
    sol = dom.project(sol)
    return SolveReport(solution=sol, final_grad_norm=0.0, iters_used=iters, converged=True,
                       objective_value=obj.value(sol))


def _l1_problem(obj: Objective):
    rho = obj.prox_coef
    if not rho > 0:
        return None
    shift = np.zeros_like(obj.prox_center) if obj.linear is None else obj.linear.copy()
    absolute = None
    for l in obj._stacked:
        if l.is_linear:
            shift = shift - l.slope
        elif l.kind == "absolute":
            absolute = l
        else:
            return None
    if absolute is None:
        return None
    A, b, om = l1_rows(absolute)
    return A, b, om, rho, obj.prox_center + shift / rho


def _l1_prox(A, b, om, rho, z, resid0, iters: int = 0):
    """Unconstrained solve; returns ``(w or None, iterations)``."""
    lip = float(np.linalg.eigvalsh(A.T @ A)[-1]) / rho if A.size else 0.0
    u = om * np.sign(resid0)
    if lip == 0.0:
        return z.copy(), iters
    target = A @ z - b
    At = A.T.copy()
    neg = -om
    v, t_acc = u.copy(), 1.0
    check = L1_CHECK_EVERY
    for k in range(1, L1_MAX_ITERS + 1):
        grad = A @ (At @ v) / rho - target
        u_next = np.minimum(np.maximum(v - grad / lip, neg), om)
        if float((v - u_next) @ (u_next - u)) > 0:
            # momentum points uphill: restart the acceleration
            t_acc = 1.0
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_acc * t_acc))
        v = u_next + ((t_acc - 1.0) / t_next) * (u_next - u)
        u, t_acc = u_next, t_next
        if k == check:
            check += max(L1_CHECK_EVERY, k // 8)
            w = z - A.T @ u / rho
            for tol in L1_ACTIVE_TOLS:
                sol = _l1_piece(A, b, om, rho, z, w, tol)
                if sol is not None:
                    return sol, iters + k
    return None, iters + L1_MAX_ITERS


def _l1_piece(A, b, om, rho, z, w, tol):
    """Closed-form minimizer on the piece selected by ``w``, if it is optimal."""
    r = A @ w - b
    active = np.abs(r) <= tol * (1.0 + np.abs(b))
    signs = np.sign(r)
    g = A[~active].T @ (om[~active] * signs[~active])
    y = z - g / rho
    M = A[active]
    if M.shape[0]:
        sol = y - np.linalg.pinv(M) @ (M @ y - b[active])
    else:
        sol = y
    r_sol = A @ sol - b
    scale = 1.0 + np.abs(b)
    if np.any(np.abs(r_sol[active]) > 1e-9 * scale[active]):
        return None
    if np.any(signs[~active] * r_sol[~active] <= 0):
        return None
    # 0 = g + rho (sol - z) + M^T mu with |mu_j| <= om_j
    need = -(g + rho * (sol - z))
    if M.shape[0]:
        mu, *_ = np.linalg.lstsq(M.T, need, rcond=None)
        miss = M.T @ mu - need
    else:
        mu, miss = np.zeros(0), -need
    size = 1.0 + float(np.linalg.norm(g))
    if np.linalg.norm(miss) > 1e-9 * size or np.any(np.abs(mu) > om[active] * (1.0 + 1e-9) + 1e-12):
        return None
    return sol


def _l1_prox_ball(A, b, om, rho, z, dom: Domain, iters: int):
    """Ball-constrained solve via the multiplier ``lam`` of ``||w - c|| <= r``."""
    from scipy.optimize import brentq

    c, r = dom.center, dom.radius
    state = {"iters": iters, "failed": False}

    def solve_at(lam):
        zl = (rho * z + lam * c) / (rho + lam)
        sol, state["iters"] = _l1_prox(A, b, om, rho + lam, zl, A @ zl - b, state["iters"])
        if sol is None:
            state["failed"] = True
            return c
        return sol

    def excess(lam):
        return float(np.linalg.norm(solve_at(lam) - c)) - r

    hi = rho
    while excess(hi) > 0 and not state["failed"]:
        hi *= 4.0
    if state["failed"]:
        return None, state["iters"]
    lam = brentq(excess, 0.0, hi, xtol=1e-14 * max(hi, 1.0), rtol=1e-14)
    sol = solve_at(lam)
    return (None if state["failed"] else sol), state["iters"]
