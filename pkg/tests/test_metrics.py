import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oilbench.core import Domain, RoundLoss, exact_min
from oilbench.envs import ToyStreamConfig, toy_stream
from oilbench.metrics import (
    BOUNDS,
    HypothesisMismatch,
    RegretLedger,
    adagrad_inequality_probe,
    check_bound,
    default_checkpoints,
    hindsight,
    interpolation_error,
    measure_constants,
    quadratic_root_probe,
    regret,
)

FREE = Domain.unconstrained()


def target(c):
    return RoundLoss([[1.0]], [[float(c)]])


def ledger(final, algo="FTRL", schedule=None, eps=None, T=4, grads=None, sigmas=None, mu=None):
    played = np.full(T, final / T)
    return RegretLedger(
        per_round_loss=played, per_round_reward=np.zeros(T), hindsight_value=0.0,
        hindsight_point=np.zeros(1), cumulative_regret=np.cumsum(played),
        avg_cumulative_loss=np.cumsum(played) / np.arange(1, T + 1),
        interpolation_errors=None if eps is None else np.asarray(eps, dtype=float),
        grad_norms=None if grads is None else np.asarray(grads, dtype=float),
        sigmas=None if sigmas is None else np.asarray(sigmas, dtype=float),
        round_mu=None if mu is None else np.asarray(mu, dtype=float),
        algo=algo, schedule=schedule,
    )


class TestHindsight:
    def test_two_quadratics(self):
        w, v = hindsight([target(0), target(2)], FREE)
        assert w[0] == pytest.approx(1.0) and v == pytest.approx(1.0)

    def test_single_loss_is_exact_min(self):
        rng = np.random.default_rng(0)
        l = RoundLoss(rng.standard_normal((3, 2)), np.eye(2)[[0, 1, 1]], kind="logistic")
        dom = Domain.ball(np.zeros(4), 2.0)
        w, v = hindsight([l], dom)
        _, best = exact_min(l, dom)
        assert v == pytest.approx(best, abs=1e-9)

    def test_interpolating_stream(self):
        _, v = hindsight(toy_stream(ToyStreamConfig(rounds=40)), FREE)
        assert v <= 1e-20

    def test_logistic_unconstrained_reports(self):
        rng = np.random.default_rng(1)
        ls = [RoundLoss(rng.standard_normal((4, 2)), np.eye(3)[rng.integers(3, size=4)], kind="logistic")
              for _ in range(3)]
        w, v, rep = hindsight(ls, FREE, return_report=True)
        assert rep is not None and v == pytest.approx(sum(l.value(w) for l in ls))

    def test_absolute_on_ball(self):
        ls = [RoundLoss([[1.0]], [[c]], kind="absolute") for c in (0.0, 2.0, 2.0)]
        w, v = hindsight(ls, Domain.ball([0.0], 1.5))
        assert w[0] == pytest.approx(1.5) and v == pytest.approx(1.5 + 0.5 + 0.5)

    def test_empty(self):
        with pytest.raises(ValueError):
            hindsight([], FREE)


class TestRegret:
    def test_two_rounds(self):
        led = regret([0.0, 2.0], [target(0), target(2)], FREE)
        assert led.cumulative_regret.tolist() == pytest.approx([0.0, 1.0])

    def test_player_at_minimizer(self):
        ls = [target(3)] * 6
        led = regret([l.value([3.0]) for l in ls], ls, FREE)
        assert np.allclose(led.cumulative_regret, 0.0)

    def test_single_round_exact(self):
        l = RoundLoss([[1.0, 2.0]], [[0.5]])
        w, v = exact_min(l, FREE)
        assert regret([l.value(w)], [l], FREE).final_regret == pytest.approx(0.0, abs=1e-12)

    def test_prefix_resolved_not_monotone(self):
        # playing 0 on targets 0, 2, 0, 0: the hindsight point moves with the prefix
        ls = [target(c) for c in (0, 2, 0, 0)]
        played = [l.value([0.0]) for l in ls]
        R = regret(played, ls, FREE).cumulative_regret
        expect = [np.cumsum(played)[t] - hindsight(ls[: t + 1], FREE)[1] for t in range(4)]
        assert np.allclose(R, expect)
        assert np.any(np.diff(R) < 0)

    def test_average_loss(self):
        led = regret([1.0, 3.0, 2.0], [target(0)] * 3, FREE)
        assert led.avg_cumulative_loss.tolist() == [1.0, 2.0, 2.0]

    def test_sparse_checkpoints(self):
        cps = default_checkpoints(1000)
        assert cps[0] == 1 and cps[-1] == 1000 and cps.size <= 51
        assert default_checkpoints(250).size == 250
        led = regret(np.zeros(300), [target(0)] * 300, FREE)
        off = np.setdiff1d(np.arange(1, 301), led.checkpoints)
        assert off.size > 0 and np.all(np.isnan(led.cumulative_regret[off - 1]))
        assert led.cumulative_regret[-1] == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            regret([0.0], [target(0)] * 2, FREE)


class TestInterpolationError:
    def test_two_quadratics(self):
        for c in (0, 2):
            assert interpolation_error(target(c), [1.0], FREE) == pytest.approx(0.5)

    def test_interpolating(self):
        cfg = ToyStreamConfig(rounds=30)
        ls = toy_stream(cfg)
        w, _ = hindsight(ls, FREE)
        assert max(interpolation_error(l, w, FREE) for l in ls) <= 1e-20

    def test_own_minimizer(self):
        l = RoundLoss([[1.0, -1.0]], [[2.0]])
        w, _ = exact_min(l, FREE)
        assert interpolation_error(l, w, FREE) == 0.0

    @given(st.floats(-10, 10), st.floats(-10, 10))
    def test_nonnegative(self, c, w):
        assert interpolation_error(target(c), [w], FREE) >= 0.0


class TestConstants:
    def test_ball_domain(self):
        ls = [RoundLoss([[1.0, 0.0], [0.0, 2.0]], [[0.0], [1.0]])]
        c = measure_constants(ls, Domain.ball(np.zeros(2), 1.0))
        assert c["D"] == 2.0 and c["L"] == pytest.approx(2.0) and c["mu"] == pytest.approx(0.5)
        assert c["G"] is not None

    def test_nonsmooth(self):
        ls = [RoundLoss([[1.0]], [[0.0]], kind="absolute")]
        c = measure_constants(ls, Domain.ball([0.0], 1.0))
        assert c["L"] is None and c["G"] == pytest.approx(1.0)


class TestBoundCheckers:
    def test_satisfied_rule(self):
        consts = {"D": 2.0, "L": 1.0, "mu": 0.0, "G": 1.0, "T": 4}
        sched = {"kind": "theorem2", "L": 1.0, "eps_budget": 0.0}
        rhs = 2 * 2.0**2 * 1.0
        at = check_bound("ftrl_smooth", ledger(rhs, schedule=sched, eps=[0, 0, 0, 0]), consts)
        assert at.rhs == pytest.approx(rhs) and at.satisfied
        over = check_bound("ftrl_smooth", ledger(rhs * (1 + 1e-6), schedule=sched, eps=[0] * 4), consts)
        assert not over.satisfied

    def test_lipschitz_rhs(self):
        T, G, D, alpha = 16, 3.0, 2.0, 0.5
        consts = {"D": D, "L": None, "mu": 0.0, "G": G, "T": T}
        rep = check_bound("ftrl_lipschitz", ledger(0.0, T=T, schedule={"kind": "inverse_sqrt_t", "alpha": alpha}),
                          consts)
        assert rep.rhs == pytest.approx(math.sqrt(T) / 2 * (G**2 * alpha + D**2 / alpha))

    def test_unbounded_domain_refused(self):
        consts = {"D": math.inf, "L": 1.0, "mu": 0.0, "G": None, "T": 4}
        with pytest.raises(HypothesisMismatch):
            check_bound("ftrl_smooth", ledger(1.0, schedule={"kind": "theorem2", "L": 1.0, "eps_budget": 0.0},
                                              eps=[0] * 4), consts)

    def test_wrong_algorithm_refused(self):
        consts = {"D": 2.0, "L": None, "mu": 0.0, "G": 1.0, "T": 4}
        with pytest.raises(HypothesisMismatch):
            check_bound("ftrl_lipschitz", ledger(0.0, algo="OGD", schedule={"kind": "constant", "eta": 1.0}), consts)

    def test_unknown(self):
        with pytest.raises(ValueError):
            check_bound("nope", ledger(0.0), {})

    def test_registry(self):
        assert set(BOUNDS) == {
            "occupancy_constant", "ftrl_smooth", "adaftrl_smooth", "ftrl_lipschitz", "adaftrl_lipschitz",
            "ftl_sc_smooth", "ftl_sc_lipschitz", "ftrl_gradient_sum",
        }

    def test_occupancy_rhs(self):
        consts = {"D": math.inf, "L": 1.0, "mu": 0.0, "G": None, "T": 4, "C": 0.5, "gamma": 0.9, "realizable": True}
        rep = check_bound("occupancy_constant", ledger(1.0, algo="FTL", schedule={"kind": "constant"}), consts)
        assert rep.rhs == pytest.approx(5.0) and rep.satisfied


class TestProbes:
    def test_adagrad_single(self):
        lhs, rhs2x, ratio = adagrad_inequality_probe([2.5])
        assert lhs == pytest.approx(2.5) and ratio == pytest.approx(1.0)

    def test_adagrad_three_four(self):
        lhs, rhs2x, _ = adagrad_inequality_probe([3.0, 4.0])
        assert lhs == pytest.approx(6.2) and rhs2x == pytest.approx(10.0)

    @given(st.lists(st.floats(0, 1e6), min_size=1, max_size=60))
    def test_adagrad_factor_two(self, g):
        lhs, rhs2x, ratio = adagrad_inequality_probe(g)
        assert lhs <= rhs2x * (1 + 1e-12) and ratio <= 2.0 + 1e-12

    def test_quadratic_root(self):
        res = quadratic_root_probe(10_000, seed=3)
        assert res["violations"] == 0 and res["premise_held"] == 10_000

    @given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 1))
    def test_quadratic_root_property(self, a, b, frac):
        hi = (a + math.sqrt(a * a + 4 * a * b)) / 2
        x = frac * hi
        assert x * x <= a * (x + b) + 1e-9 * (1 + a * (x + b))
        assert x <= a + math.sqrt(a * b) + 1e-12
