"""Desk-scale problem generators: the tabular gridworld and synthetic regression streams."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import RoundLoss

UP, DOWN, LEFT, RIGHT, STAY = range(5)
ACTION_NAMES = ("up", "down", "left", "right", "stay")
N_ACTIONS = 5
_MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1), STAY: (0, 0)}


# ---------------------------------------------------------------------------
# Gridworld
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpertOracle:
    """Expert action per ``(cell, round)`` query.

    ``alternating``: up/right on odd rounds, down/left on even rounds. With
    ``rule="random"`` the choice between the two is a seeded coin flip per
    query; with ``rule="checker"`` it is fixed by the parity of the cell.
    ``stationary``: a fixed cell -> action table. ``policy``: the greedy action
    of a linear policy over one-hot cells.
    """

    kind: str = "alternating"
    rule: str = "random"
    table: Optional[tuple] = None
    weights: Optional[np.ndarray] = None
    seed: int = 0

    def action(self, cell: int, round: int) -> int:
        if self.kind == "alternating":
            pair = (UP, RIGHT) if round % 2 == 1 else (DOWN, LEFT)
            if self.rule == "checker":
                return pair[cell % 2]
            coin = np.random.default_rng([self.seed, round, cell]).integers(2)
            return pair[int(coin)]
        if self.kind == "stationary":
            return int(self.table[cell])
        if self.kind == "policy":
            n_cells = self.weights.size // N_ACTIONS
            return int(np.argmax(self.weights.reshape(N_ACTIONS, n_cells)[:, cell]))
        raise ValueError(f"unknown expert kind {self.kind!r}")

    def actions(self, n_cells: int, round: int) -> np.ndarray:
        return np.array([self.action(c, round) for c in range(n_cells)])


@dataclass(frozen=True)
class Mdp:
    width: int = 7
    height: int = 7
    horizon: int = 5
    gamma: float = 0.9
    expert: ExpertOracle = field(default_factory=ExpertOracle)

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    @property
    def n_actions(self) -> int:
        return N_ACTIONS

    @property
    def policy_dim(self) -> int:
        return N_ACTIONS * self.n_cells

    def next_cell(self, cell: int, action: int) -> int:
        r, c = divmod(cell, self.width)
        dr, dc = _MOVES[action]
        nr, nc = r + dr, c + dc
        if 0 <= nr < self.height and 0 <= nc < self.width:
            return nr * self.width + nc
        return cell

    def transition_table(self) -> np.ndarray:
        """``table[cell, action]`` = next cell."""
        return np.array([[self.next_cell(s, a) for a in range(N_ACTIONS)] for s in range(self.n_cells)])

    def start_distribution(self) -> np.ndarray:
        return np.full(self.n_cells, 1.0 / self.n_cells)

    def greedy_policy(self, weights) -> np.ndarray:
        """Agent action per cell (argmax of logits, ties to the lowest id)."""
        W = np.asarray(weights, dtype=np.float64).reshape(N_ACTIONS, self.n_cells)
        return np.argmax(W, axis=0)


def goal_expert(width: int = 7, height: int = 7, goal: Optional[tuple] = None) -> ExpertOracle:
    """Stationary expert walking to ``goal`` (rows first), staying once there."""
    gr, gc = goal if goal is not None else (height // 2, width // 2)
    table = []
    for cell in range(width * height):
        r, c = divmod(cell, width)
        if r > gr:
            table.append(UP)
        elif r < gr:
            table.append(DOWN)
        elif c < gc:
            table.append(RIGHT)
        elif c > gc:
            table.append(LEFT)
        else:
            table.append(STAY)
    return ExpertOracle(kind="stationary", table=tuple(table))


@dataclass
class EpisodeBatch:
    round: int
    cells: np.ndarray
    agent_actions: np.ndarray
    expert_actions: np.ndarray
    rewards: np.ndarray
    behavior: str = "agent"
    n_cells: int = 49

    def __len__(self) -> int:
        return self.cells.size

    @property
    def state_features(self) -> np.ndarray:
        return np.eye(self.n_cells)[self.cells]


def rollout(mdp: Mdp, policy_weights, round: int, episodes: int = 1, seed: int = 0,
            behavior: str = "agent") -> EpisodeBatch:
    if behavior not in ("agent", "expert"):
        raise ValueError(f"behavior must be 'agent' or 'expert', not {behavior!r}")
    w = np.asarray(policy_weights, dtype=np.float64).reshape(-1)
    if w.size != mdp.policy_dim:
        raise ValueError(f"policy weights need dim {mdp.policy_dim}, got {w.size}")
    greedy = mdp.greedy_policy(w)
    rng = np.random.default_rng([seed, round])
    cells, agent, expert = [], [], []
    for _ in range(episodes):
        cell = int(rng.integers(mdp.n_cells))
        for _ in range(mdp.horizon):
            a = int(greedy[cell])
            e = mdp.expert.action(cell, round)
            cells.append(cell)
            agent.append(a)
            expert.append(e)
            cell = mdp.next_cell(cell, a if behavior == "agent" else e)
    agent = np.array(agent)
    expert = np.array(expert)
    return EpisodeBatch(
        round=round,
        cells=np.array(cells),
        agent_actions=agent,
        expert_actions=expert,
        rewards=(agent == expert).astype(np.float64),
        behavior=behavior,
        n_cells=mdp.n_cells,
    )


def build_round_loss(batch: EpisodeBatch, kind: str = "logistic", delta: float = 1.0) -> RoundLoss:
    """One-hot cells as features, one-hot expert actions as targets."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    targets = np.eye(N_ACTIONS)[batch.expert_actions]
    return RoundLoss(batch.state_features, targets, kind=kind, delta=delta)


def occupancy(mdp: Mdp, policy_weights, tau: int) -> np.ndarray:
    """Exact probability of each cell at step ``tau`` under the greedy agent."""
    if not 0 <= tau <= mdp.horizon:
        raise ValueError(f"tau must lie in [0, {mdp.horizon}]")
    return occupancies(mdp, policy_weights, tau)[tau]


def occupancies(mdp: Mdp, policy_weights, last_tau: Optional[int] = None, actions=None) -> np.ndarray:
    """Rows ``tau = 0..last_tau`` of the state distribution (default: horizon - 1).

    ``actions`` overrides the greedy policy with a fixed per-cell action table.
    """
    last_tau = mdp.horizon - 1 if last_tau is None else last_tau
    acts = mdp.greedy_policy(policy_weights) if actions is None else np.asarray(actions)
    nxt = mdp.transition_table()[np.arange(mdp.n_cells), acts]
    p = mdp.start_distribution()
    out = [p]
    for _ in range(last_tau):
        q = np.zeros_like(p)
        np.add.at(q, nxt, p)
        out.append(q)
        p = q
    return np.array(out)


def step_weights(mdp: Mdp) -> np.ndarray:
    """Normalized discount weights over the steps of one episode."""
    w = mdp.gamma ** np.arange(mdp.horizon)
    return w / w.sum()


def expected_round_loss(mdp: Mdp, policy_weights, round: int, kind: str = "squared",
                        delta: float = 1.0, behavior: str = "agent") -> RoundLoss:
    """Loss under the exact discounted state distribution of the behavior policy."""
    expert = mdp.expert.actions(mdp.n_cells, round)
    occ = occupancies(mdp, policy_weights, actions=expert if behavior == "expert" else None)
    mass = step_weights(mdp) @ occ
    cells = np.flatnonzero(mass > 0)
    targets = np.eye(N_ACTIONS)[expert[cells]]
    return RoundLoss(np.eye(mdp.n_cells)[cells], targets, kind=kind, delta=delta,
                     sample_weights=mass[cells])


def expected_divergence(mdp: Mdp, policy_weights, round: int, kind: str = "squared",
                        delta: float = 1.0) -> np.ndarray:
    """``E_{s ~ p^tau}[D(pi(s), pi_e(s))]`` for every step ``tau`` of the episode."""
    occ = occupancies(mdp, policy_weights)
    targets = np.eye(N_ACTIONS)[mdp.expert.actions(mdp.n_cells, round)]
    per_cell = RoundLoss(np.eye(mdp.n_cells), targets, kind=kind, delta=delta,
                         sample_weights=np.ones(mdp.n_cells))
    W = np.asarray(policy_weights, dtype=np.float64).reshape(N_ACTIONS, mdp.n_cells)
    cell_div = np.array([_cell_divergence(per_cell, W, c) for c in range(mdp.n_cells)])
    return occ @ cell_div


def _cell_divergence(per_cell: RoundLoss, W: np.ndarray, c: int) -> float:
    single = RoundLoss(per_cell.features[c:c + 1], per_cell.targets[c:c + 1], kind=per_cell.kind,
                       delta=per_cell.delta)
    return single.value(W.reshape(-1))


# ---------------------------------------------------------------------------
# Toy online regression
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyStreamConfig:
    d_feature: int = 10
    d_output: int = 3
    regime: str = "simple"
    loss_kind: str = "squared"
    samples_per_round: int = 1
    rounds: int = 250
    seed: int = 0
    noise_std: float = 0.0
    target_scale: float = 1.0
    delta: float = 1.0

    def __post_init__(self):
        if self.regime not in ("simple", "adversarial"):
            raise ValueError(f"unknown regime {self.regime!r}")

    def with_seed(self, seed: int) -> "ToyStreamConfig":
        return replace(self, seed=seed)


def target_matrix(cfg: ToyStreamConfig) -> np.ndarray:
    """The hidden map ``W*`` of shape ``(d_output, d_feature)``."""
    rng = np.random.default_rng([cfg.seed, 0x5eed])
    return cfg.target_scale * rng.standard_normal((cfg.d_output, cfg.d_feature))


def round_sign(cfg: ToyStreamConfig, round: int) -> float:
    if cfg.regime == "simple":
        return 1.0
    return 1.0 if round % 2 == 1 else -1.0


def toy_round(cfg: ToyStreamConfig, round: int, rng: Optional[np.random.Generator] = None,
              w_star: Optional[np.ndarray] = None) -> RoundLoss:
    if round < 1:
        raise ValueError("rounds are numbered from 1")
    if rng is None:
        rng = np.random.default_rng([cfg.seed, round])
    W = target_matrix(cfg) if w_star is None else w_star
    x = rng.standard_normal((cfg.samples_per_round, cfg.d_feature))
    z = round_sign(cfg, round) * x @ W.T
    if cfg.noise_std > 0:
        z = z + cfg.noise_std * rng.standard_normal(z.shape)
    if cfg.loss_kind == "logistic":
        y = np.eye(cfg.d_output)[np.argmax(z, axis=1)]
    else:
        y = z
    return RoundLoss(x, y, kind=cfg.loss_kind, delta=cfg.delta)


def toy_stream(cfg: ToyStreamConfig) -> list[RoundLoss]:
    W = target_matrix(cfg)
    return [toy_round(cfg, t, w_star=W) for t in range(1, cfg.rounds + 1)]
