"""Shared numeric types: parameter vectors, feasible domains and per-round losses.

A policy is a linear map ``W`` of shape ``(d_output, d_feature)``; optimizers see
it flattened row-major as a 1-D float array (the "parameter vector").
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

LOSS_KINDS = ("squared", "absolute", "logistic", "huber", "linear")
BALL_CUT_LIMIT = 400
BALL_CUT_TOL = 1e-10


class ShapeError(ValueError):
    """Array dimensions do not agree."""


class DomainError(ValueError):
    """A non-finite value was passed where a finite one is required."""


def param_vector(coords) -> np.ndarray:
    """Return ``coords`` as a finite 1-D float64 array (copy)."""
    w = np.array(coords, dtype=np.float64).reshape(-1)
    if w.size == 0:
        raise ShapeError("parameter vector must have positive dimension")
    if not np.all(np.isfinite(w)):
        raise DomainError("parameter vector contains NaN or Inf")
    return w


# ---------------------------------------------------------------------------
# Domains
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Domain:
    """Feasible set: unconstrained, a Euclidean ball, or a box."""

    kind: str = "unconstrained"
    center: Optional[np.ndarray] = None
    radius: float = math.inf
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None

    @classmethod
    def unconstrained(cls) -> "Domain":
        return cls()

    @classmethod
    def ball(cls, center, radius: float) -> "Domain":
        if radius < 0:
            raise ValueError("ball radius must be nonnegative")
        return cls(kind="ball", center=param_vector(center), radius=float(radius))

    @classmethod
    def box(cls, lo, hi) -> "Domain":
        lo, hi = param_vector(lo), param_vector(hi)
        if lo.shape != hi.shape:
            raise ShapeError("box bounds differ in dimension")
        if np.any(lo > hi):
            raise ValueError("box requires lo <= hi")
        return cls(kind="box", lo=lo, hi=hi)

    @property
    def bounded(self) -> bool:
        return self.kind != "unconstrained"

    @property
    def diameter(self) -> float:
        if self.kind == "ball":
            return 2.0 * self.radius
        if self.kind == "box":
            return float(np.linalg.norm(self.hi - self.lo))
        return math.inf

    def max_norm(self) -> float:
        """Largest Euclidean norm of any feasible point."""
        if self.kind == "ball":
            return float(np.linalg.norm(self.center)) + self.radius
        if self.kind == "box":
            return float(np.linalg.norm(np.maximum(np.abs(self.lo), np.abs(self.hi))))
        return math.inf

    def project(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        if self.kind == "ball":
            if w.shape != self.center.shape:
                raise ShapeError(f"domain dim {self.center.size} != {w.size}")
            diff = w - self.center
            norm = float(np.linalg.norm(diff))
            if norm <= self.radius:
                return w.copy()
            return self.center + diff * (self.radius / norm)
        if self.kind == "box":
            if w.shape != self.lo.shape:
                raise ShapeError(f"domain dim {self.lo.size} != {w.size}")
            return np.clip(w, self.lo, self.hi)
        return w.copy()

    def distance(self, w: np.ndarray) -> float:
        return float(np.linalg.norm(np.asarray(w) - self.project(w)))

    def contains(self, w: np.ndarray, tol: float = 1e-12) -> bool:
        return self.distance(w) <= tol

    def to_dict(self) -> dict:
        if self.kind == "ball":
            return {"kind": "ball", "center": self.center.tolist(), "radius": self.radius}
        if self.kind == "box":
            return {"kind": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist()}
        return {"kind": "unconstrained"}


def project(dom: Domain, w) -> np.ndarray:
    return dom.project(w)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossMeta:
    smoothness_L: Optional[float]
    strong_convexity_mu: float = 0.0
    lipschitz_G: Optional[float] = None

    def __post_init__(self):
        if self.smoothness_L is not None and self.strong_convexity_mu > self.smoothness_L * (1 + 1e-12):
            raise ValueError("strong convexity constant exceeds smoothness constant")


def _row_max(z: np.ndarray) -> np.ndarray:
    # numpy's axis-1 reductions are slow for a handful of columns
    if z.shape[1] <= 16:
        return functools.reduce(np.maximum, z.T)
    return z.max(axis=1)


@dataclass(frozen=True, eq=False)
class RoundLoss:
    """One round's loss over a batch of ``(feature, target)`` pairs.

    The value is ``sum_i omega_i * phi(W x_i, y_i)`` where ``omega_i`` is
    ``weight / n_samples`` unless explicit ``sample_weights`` are given, in which
    case ``omega_i = weight * sample_weights[i]``.

    Kind ``linear`` is the degenerate loss ``<slope, w>`` produced by
    :func:`linearize`; it carries no samples and may be negative.
    """

    features: np.ndarray
    targets: np.ndarray
    kind: str = "squared"
    delta: float = 1.0
    weight: float = 1.0
    sample_weights: Optional[np.ndarray] = None
    slope: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.weight <= 0:
            raise ValueError("loss weight must be positive")
        if self.kind == "huber" and self.delta <= 0:
            raise ValueError("huber delta must be positive")
        if self.kind == "linear":
            if self.slope is None:
                raise ValueError("linear loss needs a slope")
            object.__setattr__(self, "slope", param_vector(self.slope))
            return
        x = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        y = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        if x.shape[0] != y.shape[0]:
            raise ShapeError(f"{x.shape[0]} feature rows but {y.shape[0]} target rows")
        if x.shape[0] == 0:
            raise ShapeError("loss needs at least one sample")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DomainError("features/targets must be finite")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "targets", y)
        if self.sample_weights is not None:
            sw = np.asarray(self.sample_weights, dtype=np.float64).reshape(-1)
            if sw.shape[0] != x.shape[0] or np.any(sw < 0):
                raise ShapeError("sample_weights must be nonnegative, one per sample")
            object.__setattr__(self, "sample_weights", sw)
        if self.sample_weights is not None:
            om = self.weight * self.sample_weights
        else:
            om = np.full(x.shape[0], self.weight / x.shape[0])
        om.setflags(write=False)
        object.__setattr__(self, "_omega", om)

    # -- shape helpers -----------------------------------------------------

    @property
    def is_linear(self) -> bool:
        return self.kind == "linear"

    @property
    def nonnegative(self) -> bool:
        return not self.is_linear

    @property
    def n_samples(self) -> int:
        return 0 if self.is_linear else self.features.shape[0]

    @property
    def d_feature(self) -> int:
        return self.features.shape[1]

    @property
    def d_output(self) -> int:
        return self.targets.shape[1]

    @property
    def dim(self) -> int:
        if self.is_linear:
            return self.slope.size
        return self.d_feature * self.d_output

    @property
    def omega(self) -> np.ndarray:
        return self._omega

    def _check(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64).reshape(-1)
        if w.size != self.dim:
            raise ShapeError(f"expected parameter of dim {self.dim}, got {w.size}")
        if not np.all(np.isfinite(w)):
            raise DomainError("parameter vector contains NaN or Inf")
        return w

    # -- evaluation --------------------------------------------------------

    def value(self, w) -> float:
        return self.value_and_grad(w, need_grad=False)[0]

    def gradient(self, w) -> np.ndarray:
        return self.value_and_grad(w)[1]

    def value_and_grad(self, w, need_grad: bool = True):
        return self._evaluate(self._check(w), need_grad)

    def _evaluate(self, w: np.ndarray, need_grad: bool):
        # w is a validated flat float vector
        if self.is_linear:
            return float(self.slope @ w), (self.slope.copy() if need_grad else None)
        x, y, om = self.features, self.targets, self.omega
        W = w.reshape(self.d_output, self.d_feature)
        z = x @ W.T
        if self.kind == "squared":
            r = z - y
            val = 0.5 * float(om @ np.einsum("ij,ij->i", r, r))
            dz = r
        elif self.kind == "absolute":
            r = z - y
            val = float(om @ np.abs(r).sum(axis=1))
            dz = np.sign(r)
        elif self.kind == "huber":
            r = z - y
            a = np.abs(r)
            d = self.delta
            per = np.where(a <= d, 0.5 * r * r, d * (a - 0.5 * d))
            val = float(om @ per.sum(axis=1))
            dz = np.clip(r, -d, d)
        else:  # logistic
            zs = z - _row_max(z)[:, None]
            e = np.exp(zs)
            ones = np.ones(z.shape[1])
            tot = (e @ ones)[:, None]
            ysum = (y @ ones)[:, None]
            # -sum_j y_j log p_j with log p = zs - log(tot)
            val = float(om @ (ysum[:, 0] * np.log(tot[:, 0]) - (y * zs) @ ones))
            if not need_grad:
                return val, None
            # targets may be any distribution; gradient of -sum y log p
            dz = e * (ysum / tot) - y
        if not need_grad:
            return val, None
        g = (dz * om[:, None]).T @ x
        return val, g.reshape(-1)

    def greedy_actions(self, w) -> np.ndarray:
        """Argmax of ``W x`` per sample (ties to the lowest index)."""
        W = self._check(w).reshape(self.d_output, self.d_feature)
        return np.argmax(self.features @ W.T, axis=1)

    # -- problem constants -------------------------------------------------

    def second_moment(self) -> np.ndarray:
        x, om = self.features, self.omega
        return (x * om[:, None]).T @ x

    def meta_constants(self, dom: Optional[Domain] = None) -> LossMeta:
        """Analytic smoothness / strong convexity / Lipschitz constants.

        ``lipschitz_G`` is a bound over ``dom`` (``None`` when unbounded and the
        kind has unbounded gradients).
        """
        if self.is_linear:
            return LossMeta(0.0, 0.0, float(np.linalg.norm(self.slope)))
        eig = np.linalg.eigvalsh(self.second_moment())
        lam_max = max(float(eig[-1]), 0.0)
        lam_min = max(float(eig[0]), 0.0) if self.d_feature > 0 else 0.0
        xnorm = np.linalg.norm(self.features, axis=1)
        om = self.omega
        k = self.d_output
        if self.kind == "squared":
            if dom is not None and dom.bounded:
                ynorm = np.linalg.norm(self.targets, axis=1)
                G = float(om @ (xnorm * (xnorm * dom.max_norm() + ynorm)))
            else:
                G = None
            return LossMeta(lam_max, lam_min, G)
        if self.kind == "absolute":
            return LossMeta(None, 0.0, float(om @ xnorm) * math.sqrt(k))
        if self.kind == "huber":
            return LossMeta(lam_max, 0.0, float(om @ xnorm) * self.delta * math.sqrt(k))
        # softmax cross-entropy: Hessian of log-sum-exp is bounded by I/2
        return LossMeta(0.5 * lam_max, 0.0, float(om @ xnorm) * math.sqrt(2.0))


def loss_value(l: RoundLoss, w) -> float:
    return l.value(w)


def loss_gradient(l: RoundLoss, w) -> np.ndarray:
    return l.gradient(w)


def linearize(l: RoundLoss, anchor) -> RoundLoss:
    """The linear surrogate ``w -> <grad l(anchor), w>``."""
    g = l.gradient(anchor)
    return RoundLoss(features=np.zeros((0, 0)), targets=np.zeros((0, 0)), kind="linear", slope=g)


def stack_losses(losses: Sequence[RoundLoss]) -> list[RoundLoss]:
    """Merge losses of the same kind into single losses with explicit sample weights.

    The sum of the returned losses equals the sum of the inputs, pointwise.
    """
    groups: dict = {}
    slope = None
    for l in losses:
        if l.is_linear:
            slope = l.slope * l.weight if slope is None else slope + l.slope * l.weight
            continue
        key = (l.kind, l.delta if l.kind == "huber" else None, l.d_feature, l.d_output)
        groups.setdefault(key, []).append(l)
    out = []
    for (kind, delta, _, _), ls in groups.items():
        if len(ls) == 1:
            out.append(ls[0])
            continue
        x = np.concatenate([l.features for l in ls])
        y = np.concatenate([l.targets for l in ls])
        om = np.concatenate([l.omega for l in ls])
        # identical (x, y) rows contribute identical penalties: merge them
        rows, inv = np.unique(np.hstack([x, y]), axis=0, return_inverse=True)
        if rows.shape[0] < x.shape[0]:
            inv = inv.reshape(-1)
            x, y = rows[:, : x.shape[1]], rows[:, x.shape[1]:]
            om = np.bincount(inv, weights=om, minlength=rows.shape[0])
        out.append(
            RoundLoss(
                features=x,
                targets=y,
                kind=kind,
                delta=delta if delta is not None else 1.0,
                sample_weights=om,
            )
        )
    if slope is not None:
        out.append(RoundLoss(np.zeros((0, 0)), np.zeros((0, 0)), kind="linear", slope=slope))
    return out


def exact_min(l: RoundLoss, dom: Domain, solver_cfg=None, return_report: bool = False):
    """Per-round minimizer ``(w*, l(w*))`` over ``dom``.

    Squared losses are solved by least squares (a trust-region solve on balls),
    absolute losses as a linear program (with tangent cuts for balls), and
    everything else goes through :func:`oilbench.solvers.solve`.
    With ``return_report`` a third element is appended: the solver report, or
    ``None`` when no iterative solve was needed.
    """
    from . import solvers

    if l.is_linear:
        raise ValueError("linear losses have no minimizer on unbounded domains")
    if l.kind == "squared" and dom.kind == "ball":
        w = _ball_lstsq(l, dom)
        return (w, l.value(w), None) if return_report else (w, l.value(w))
    if l.kind == "squared":
        w = weighted_lstsq([l])
        if dom.contains(w, tol=0.0) or not dom.bounded:
            return (w, l.value(w), None) if return_report else (w, l.value(w))
    if l.kind == "absolute":
        w = _l1_regression(l, dom)
        if w is not None:
            return (w, l.value(w), None) if return_report else (w, l.value(w))
    cfg = solver_cfg or solvers.SolverConfig(grad_tol=1e-10)
    start = dom.project(np.zeros(l.dim))
    rep = solvers.solve(solvers.Objective([l]), dom, start, cfg)
    if return_report:
        return rep.solution, rep.objective_value, rep
    return rep.solution, rep.objective_value


def weighted_lstsq(losses: Sequence[RoundLoss]) -> np.ndarray:
    """Minimum-norm minimizer of a sum of squared losses (unconstrained)."""
    xs, ys = [], []
    for l in losses:
        if l.kind != "squared":
            raise ValueError("weighted_lstsq needs squared losses")
        s = np.sqrt(l.omega)[:, None]
        xs.append(l.features * s)
        ys.append(l.targets * s)
    X, Y = np.concatenate(xs), np.concatenate(ys)
    sol, *_ = np.linalg.lstsq(X, Y, rcond=None)
    return sol.T.reshape(-1)


def _ball_lstsq(l: RoundLoss, dom: Domain) -> np.ndarray:
    """Squared loss minimized over a ball, solved as a trust-region subproblem.

    With ``V = W - C`` the optimality condition is ``(S + lam I) V_j = B_j`` per
    output row, ``S = X^T Om X``. The multiplier ``lam`` is the root of the
    decreasing function ``||V(lam)|| - r``; when the minimum-norm
    unconstrained solution is already inside the ball ``lam = 0``.
    """
    from scipy.optimize import brentq

    x, y, om = l.features, l.targets, l.omega
    k, d = y.shape[1], x.shape[1]
    C = dom.center.reshape(k, d)
    S = x.T @ (om[:, None] * x)
    B = x.T @ (om[:, None] * (y - x @ C.T))
    lam, Q = np.linalg.eigh(S)
    Bt = Q.T @ B
    keep = lam > max(lam[-1], 1.0) * d * np.finfo(float).eps
    Bt[~keep] = 0.0
    mass = np.sum(Bt * Bt, axis=1)
    lam = np.where(keep, lam, 0.0)

    def norm_at(mu: float) -> float:
        den = lam + mu
        return math.sqrt(float(np.sum(np.divide(mass, den * den, out=np.zeros_like(mass), where=den > 0))))

    r = dom.radius
    if norm_at(0.0) <= r:
        mu = 0.0
    elif r == 0.0:
        return dom.center.copy()
    else:
        hi = math.sqrt(float(mass.sum())) / r
        mu = brentq(lambda m: norm_at(m) - r, 0.0, hi, xtol=1e-15 * max(hi, 1.0), rtol=1e-15)
    den = lam + mu
    Vt = np.divide(Bt, den[:, None], out=np.zeros_like(Bt), where=den[:, None] > 0)
    V = (Q @ Vt).T
    return dom.project(C.reshape(-1) + V.reshape(-1))


def l1_rows(l: RoundLoss):
    """``(A, b, om)`` with ``l(w) = sum_j om_j |A_j.w - b_j|`` for an absolute loss.

    Row ``i * k + j`` is sample ``i`` placed in the block of output ``j``.
    """
    x, y = l.features, l.targets
    k, d = y.shape[1], x.shape[1]
    A = np.zeros((x.shape[0] * k, k * d))
    for j in range(k):
        A[j::k, j * d:(j + 1) * d] = x
    return A, y.reshape(-1), np.repeat(l.omega, k)


def _l1_regression(l: RoundLoss, dom: Domain) -> Optional[np.ndarray]:
    """Exact L1 regression over ``dom``, or ``None`` if it cannot be certified.

    The LP is solved in its dual form ``min b.v + h.theta`` subject to
    ``A^T v + G^T theta = 0``, ``|v| <= om``, ``theta >= 0`` where ``G w <= h``
    describes the domain; ``w`` is read off the equality multipliers. Balls are
    approached by tangent cuts until a boundary point passes the KKT check or
    the projected cut point closes the gap to the LP bound.
    """
    A, b, om = l1_rows(l)
    nw = A.shape[1]
    eye = np.eye(nw)
    if dom.kind == "box":
        G, h = np.vstack([eye, -eye]), np.concatenate([dom.hi, -dom.lo])
    elif dom.kind == "ball":
        G = np.vstack([eye, -eye])
        h = np.concatenate([dom.center + dom.radius, dom.radius - dom.center])
    else:
        G, h = np.zeros((0, nw)), np.zeros(0)
    best, best_val = None, math.inf
    for _ in range(BALL_CUT_LIMIT):
        found = _l1_dual_lp(A, b, om, G, h)
        if found is None:
            return None
        w, lower = found
        if dom.kind != "ball":
            return w
        v = w - dom.center
        norm = float(np.linalg.norm(v))
        if norm <= dom.radius:
            return w
        for tol in (1e-10, 1e-8, 1e-6):
            p = _sphere_polish(l, dom, A, b, w, tol)
            if p is not None:
                return p
        p = dom.project(w)
        val = l.value(p)
        if val < best_val:
            best, best_val = p, val
        if best_val - lower <= BALL_CUT_TOL * (1.0 + abs(lower)):
            return best
        u = v / norm
        G = np.vstack([G, u])
        h = np.append(h, dom.radius + float(u @ dom.center))
    return None


def _l1_dual_lp(A, b, om, G, h):
    """Solve ``min sum om|Aw - b|`` s.t. ``G w <= h`` through its dual; ``(w, value)`` or ``None``."""
    from scipy.optimize import linprog

    m, p = A.shape[0], G.shape[0]
    cost = np.concatenate([b, h])
    bounds = [(-o, o) for o in om] + [(0, None)] * p
    res = linprog(cost, A_eq=np.hstack([A.T, G.T]), b_eq=np.zeros(A.shape[1]), bounds=bounds,
                  method="highs")
    if res.status != 0:
        return None
    value = -float(res.fun)
    tol = 1e-9 * (1.0 + abs(value))
    for sign in (1.0, -1.0):
        w = sign * np.asarray(res.eqlin.marginals)
        if np.all(G @ w <= h + 1e-9 * (1.0 + np.abs(h))) and abs(float(om @ np.abs(A @ w - b)) - value) <= tol:
            return w, value
    return None


def _sphere_polish(l: RoundLoss, dom: Domain, rows: np.ndarray, rhs: np.ndarray, w: np.ndarray,
                   tol: float) -> Optional[np.ndarray]:
    """Minimizer over the ball, if the residual signs of ``w`` identify it.

    Residuals within ``tol`` of zero stay zero; on that affine set the L1 loss
    is linear, so its minimizer over the ball's boundary has a closed form. The
    candidate is returned only when it passes the optimality (KKT) check.
    """
    r = rows @ w - rhs
    active = np.abs(r) <= tol * (1.0 + np.abs(rhs))
    weights = np.repeat(l.omega, l.d_output)
    g = rows[~active].T @ (weights[~active] * np.sign(r[~active]))
    M = rows[active]
    c = dom.center
    if M.shape[0]:
        pinv = np.linalg.pinv(M)
        base = c - pinv @ (M @ c - rhs[active])
        if np.max(np.abs(M @ base - rhs[active]), initial=0.0) > 1e-9 * (1.0 + np.max(np.abs(rhs))):
            return None
        g = g - pinv @ (M @ g)
    else:
        base = c
    h_sq = dom.radius ** 2 - float((base - c) @ (base - c))
    if h_sq < 0:
        return None
    gn = float(np.linalg.norm(g))
    # a flat direction leaves the loss constant on the slice: its nearest point is optimal
    p = base if gn <= 1e-12 * (1.0 + gn) else base - math.sqrt(h_sq) * g / gn
    return p if _l1_ball_kkt(l, dom, rows, rhs, p, active, np.sign(r)) else None


def _l1_ball_kkt(l: RoundLoss, dom: Domain, rows, rhs, p, active, signs, tol: float = 1e-9) -> bool:
    """``0 in sum_j w_j s_j a_j + sum_active mu_j a_j + lam (p - c)`` with ``|mu_j| <= w_j``, ``lam >= 0``."""
    scale = 1.0 + np.abs(rhs)
    r = rows @ p - rhs
    if np.any(np.abs(r[active]) > 1e-9 * scale[active]):
        return False
    if np.any(np.sign(r[~active]) != signs[~active]):
        return False
    slack = dom.radius - float(np.linalg.norm(p - dom.center))
    if slack < -1e-9 * (1.0 + dom.radius):
        return False
    on_sphere = slack <= 1e-9 * (1.0 + dom.radius)
    weights = np.repeat(l.omega, l.d_output)
    g = rows[~active].T @ (weights[~active] * signs[~active])
    basis = rows[active].T
    if on_sphere:
        basis = np.column_stack([basis, p - dom.center])
    size = 1.0 + float(np.linalg.norm(g))
    if basis.shape[1] == 0:
        return bool(np.linalg.norm(g) <= tol * size)
    coef, *_ = np.linalg.lstsq(basis, -g, rcond=None)
    if np.linalg.norm(basis @ coef + g) > tol * size:
        return False
    mu, lam = (coef[:-1], coef[-1]) if on_sphere else (coef, 0.0)
    return bool(lam >= -tol * size and np.all(np.abs(mu) <= weights[active] * (1.0 + tol) + tol))
