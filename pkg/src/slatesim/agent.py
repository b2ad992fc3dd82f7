"""Cascading Q-networks: linear-time slate argmax, replay training, baseline policies."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import nets
from .data import HistoryBuffer, ItemCatalog
from .env import Policy, SlateEnv, reset, step
from .nets import Activation, CascadeQNet, GradientBundle, ScorerNet
from .training import UserModel


@dataclass(frozen=True)
class Transition:
    hist: np.ndarray
    slate: tuple[int, ...]
    reward: float
    next_hist: np.ndarray
    next_pool: tuple[int, ...]
    terminal: bool


class ReplayMemory:
    """FIFO transition store of bounded capacity; sampling is i.i.d. with replacement."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._buf: deque[Transition] = deque(maxlen=capacity)

    def add(self, transition: Transition) -> None:
        self._buf.append(transition)

    def sample(self, size: int, rng: np.random.Generator) -> list[Transition]:
        if not self._buf:
            raise ValueError("cannot sample from an empty memory")
        idx = rng.integers(0, len(self._buf), size=size)
        return [self._buf[i] for i in idx]

    def items(self) -> list[Transition]:
        return list(self._buf)

    def __len__(self) -> int:
        return len(self._buf)


class RewardMode(Enum):
    LEARNED_REWARD = "learned"
    PLUS_MINUS_ONE = "pm1"


class PolicyKind(Enum):
    CDQN = "cdqn"
    GREEDY_USER_MODEL = "greedy"
    ADDITIVE_Q = "additive"
    RANDOM = "random"


@dataclass
class CDQNConfig:
    gamma: float = 0.9
    epsilon: float = 0.1
    epsilon_final: float | None = None
    iterations: int = 200
    horizon: int = 10
    batch_users: int = 10
    minibatch: int = 32
    lr: float = 0.05
    seed: int = 0
    capacity: int = 10_000
    reward_mode: RewardMode = RewardMode.LEARNED_REWARD
    n: int = 4
    hidden: int = 16
    activation: Activation = Activation.ELU
    frozen_target_period: int = 0
    momentum: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must be in [0, 1)")
        for eps in (self.epsilon, self.epsilon_final):
            if eps is not None and not (0.0 <= eps <= 1.0):
                raise ValueError("epsilon must be in [0, 1]")
        if self.iterations < 0 or self.horizon < 1 or self.batch_users < 1 or self.minibatch < 1:
            raise ValueError("iterations >= 0 and positive horizon/batch sizes required")


@dataclass
class PolicyHandle:
    kind: PolicyKind
    qnet: CascadeQNet | None = None
    user_model: UserModel | None = None

    def __post_init__(self):
        if self.kind in (PolicyKind.CDQN, PolicyKind.ADDITIVE_Q) and self.qnet is None:
            raise ValueError(f"{self.kind.value} policy needs a qnet")
        if self.kind is PolicyKind.GREEDY_USER_MODEL and self.user_model is None:
            raise ValueError("greedy policy needs a user model")


@dataclass
class EvalCounter:
    count: int = 0


# qeval(j, prefix_ids, candidate_ids) -> array of Q^j values, one per candidate
QEval = Callable[[int, tuple[int, ...], tuple[int, ...]], np.ndarray]


def net_qeval(qnet: CascadeQNet, state_vec: np.ndarray, catalog: ItemCatalog) -> QEval:
    """Vectorized per-position evaluator of a cascade net for one embedded state."""
    dn = qnet.pw.out_dim
    d = catalog.d

    def qeval(j: int, prefix: tuple[int, ...], cands: tuple[int, ...]) -> np.ndarray:
        L = qnet.heads.L[j - 1]
        c = qnet.heads.c[j - 1]
        q = qnet.heads.q[j - 1]
        fixed = np.concatenate([state_vec] + [catalog.features(i) for i in prefix])
        z0 = L[:, : dn + d * (j - 1)] @ fixed + c
        cand_feats = catalog.feature_matrix(cands)
        Z = z0[:, None] + L[:, dn + d * (j - 1):] @ cand_feats.T
        return q @ nets.act(Z, qnet.heads.activation)

    return qeval


def cascade_plan(qeval: QEval, pool: Sequence[int], k: int,
                 counter: EvalCounter | None = None) -> tuple[list[int], list[float]]:
    """Greedy cascade: fix each slate position in turn by a one-position argmax.

    Returns the ordered slate and the per-position achieved values; the last
    value is Q^k at the full slate. Ties break toward the lowest item id."""
    remaining = sorted(int(i) for i in set(pool))
    if len(remaining) < k:
        raise ValueError(f"pool smaller than k: {len(remaining)} < {k}")
    slate: list[int] = []
    values: list[float] = []
    for j in range(1, k + 1):
        vals = np.asarray(qeval(j, tuple(slate), tuple(remaining)), dtype=float)
        if counter is not None:
            counter.count += len(remaining)
        best = int(np.argmax(vals))  # first maximum wins: lowest id on ties
        slate.append(remaining[best])
        values.append(float(vals[best]))
        remaining.pop(best)
    return slate, values


def cascade_argmax(qeval: QEval, pool: Sequence[int], k: int,
                   counter: EvalCounter | None = None) -> list[int]:
    """Ordered slate maximizing the cascade in at most k * |pool| evaluations."""
    return cascade_plan(qeval, pool, k, counter)[0]


def cascade_slate(qnet: CascadeQNet, buffer: HistoryBuffer, pool: Sequence[int],
                  catalog: ItemCatalog, counter: EvalCounter | None = None) -> list[int]:
    """Embed the history and run the cascade over the pool."""
    s = nets.embed_state(buffer, qnet.pw)
    return cascade_argmax(net_qeval(qnet, s, catalog), pool, qnet.heads.k, counter)


def compute_target(reward: float, next_hist: np.ndarray, next_pool: Sequence[int],
                   qnet: CascadeQNet, catalog: ItemCatalog, gamma: float,
                   terminal: bool = False) -> float:
    """TD target y = r + gamma * Q^k at the greedy cascade slate of the next state."""
    if terminal:
        return float(reward)
    s = nets.embed_history(next_hist, qnet.pw)
    _, values = cascade_plan(net_qeval(qnet, s, catalog), next_pool, qnet.heads.k)
    return float(reward + gamma * values[-1])


# ---------------------------------------------------------------------------
# policies


def greedy_user_model_policy(user_model: UserModel, buffer: HistoryBuffer,
                             pool: Sequence[int], k: int, catalog: ItemCatalog) -> list[int]:
    """Top-k pool items by the behavior logit; ties go to the lower item id."""
    ids = sorted(int(i) for i in set(pool))
    if len(ids) < k:
        raise ValueError(f"pool smaller than k: {len(ids)} < {k}")
    s = nets.embed_state(buffer, user_model.alpha.pw)
    logits = nets.head_scores(user_model.alpha.head, s, catalog.feature_matrix(ids))
    order = np.argsort(-logits, kind="stable")
    return [ids[i] for i in order[:k]]


def additive_q_policy(qnet: CascadeQNet, buffer: HistoryBuffer, pool: Sequence[int],
                      k: int, catalog: ItemCatalog) -> list[int]:
    """Top-k items by the single-item Q values (the argmax of the additive slate value)."""
    ids = sorted(int(i) for i in set(pool))
    if len(ids) < k:
        raise ValueError(f"pool smaller than k: {len(ids)} < {k}")
    s = nets.embed_state(buffer, qnet.pw)
    vals = net_qeval(qnet, s, catalog)(1, (), tuple(ids))
    order = np.argsort(-vals, kind="stable")
    return [ids[i] for i in order[:k]]


def random_slate(pool: Sequence[int], k: int, rng: np.random.Generator) -> list[int]:
    ids = sorted(int(i) for i in set(pool))
    if len(ids) < k:
        raise ValueError(f"pool smaller than k: {len(ids)} < {k}")
    picked = rng.choice(len(ids), size=k, replace=False)
    return [ids[i] for i in picked]


def make_policy(handle: PolicyHandle, catalog: ItemCatalog, k: int) -> Policy:
    """Wrap a policy handle as a (buffer, pool, rng) -> slate callable."""
    if handle.kind is PolicyKind.RANDOM:
        return lambda buffer, pool, rng: random_slate(pool, k, rng)
    if handle.kind is PolicyKind.GREEDY_USER_MODEL:
        model = handle.user_model
        return lambda buffer, pool, rng: greedy_user_model_policy(model, buffer, pool, k, catalog)
    if handle.kind is PolicyKind.ADDITIVE_Q:
        qnet = handle.qnet
        return lambda buffer, pool, rng: additive_q_policy(qnet, buffer, pool, k, catalog)
    qnet = handle.qnet
    return lambda buffer, pool, rng: cascade_slate(qnet, buffer, pool, catalog)


# ---------------------------------------------------------------------------
# training loops (batched users, epsilon-greedy, replay, shared TD target)

# env_factory(episode_index) -> (env, user, episode seed)
EnvFactory = Callable[[int], tuple[SlateEnv, UserModel, int]]


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"TD loss became non-finite at iteration {iteration}")
        self.iteration = iteration


def make_env_factory(env: SlateEnv, user: UserModel, base_seed: int) -> EnvFactory:
    """Episodes seeded base_seed + 2*i, preserving the seed's parity across episodes."""
    return lambda episode: (env, user, base_seed + 2 * episode)


def _epsilon_at(config: CDQNConfig, iteration: int) -> float:
    if config.epsilon_final is None or config.iterations <= 1:
        return config.epsilon
    frac = iteration / (config.iterations - 1)
    return config.epsilon + (config.epsilon_final - config.epsilon) * frac


def _mode_reward(outcome, config: CDQNConfig) -> float:
    if config.reward_mode is RewardMode.PLUS_MINUS_ONE:
        return 1.0 if outcome.clicked else -1.0
    return outcome.reward


def train_cdqn(env_factory: EnvFactory, config: CDQNConfig,
               on_iteration: Callable[[int, dict], None] | None = None,
               on_transition: Callable[[Transition], None] | None = None) -> CascadeQNet:
    """Cascaded TD learning with experience replay and epsilon-greedy exploration.

    Every position's network regresses on the shared target
    y = r + gamma * Q^k(next state, greedy cascade slate)."""
    env0, user0, _ = env_factory(0)
    catalog = env0.catalog
    k = env0.config.k
    rng = np.random.default_rng(config.seed)
    qnet = nets.init_cascade_net(catalog.d, user0.m, config.n, config.hidden, k, rng,
                                 config.activation)
    memory = ReplayMemory(config.capacity)
    velocity: dict[str, np.ndarray] = {}
    target_net = qnet
    updates = 0
    episode = 0
    for it in range(config.iterations):
        eps = _epsilon_at(config, it)
        sessions = []
        for _ in range(config.batch_users):
            env, user, ep_seed = env_factory(episode)
            episode += 1
            sessions.append([env, user, reset(env, user, ep_seed)])
        losses = []
        for t in range(config.horizon):
            for session in sessions:
                env, user, state = session
                if rng.random() < eps:
                    slate = random_slate(state.pool, k, rng)
                else:
                    slate = cascade_slate(qnet, state.buffer, state.pool, catalog)
                out = step(env, state, slate, user)
                transition = Transition(
                    hist=state.buffer.matrix.copy(),
                    slate=tuple(slate),
                    reward=_mode_reward(out, config),
                    next_hist=out.next_state.buffer.matrix.copy(),
                    next_pool=out.next_state.pool,
                    terminal=(t == config.horizon - 1),
                )
                memory.add(transition)
                if on_transition is not None:
                    on_transition(transition)
                session[2] = out.next_state
            if len(memory) >= config.minibatch:
                batch = memory.sample(config.minibatch, rng)
                if config.frozen_target_period > 0 and updates % config.frozen_target_period == 0:
                    target_net = nets.clone_params(qnet)
                boot = target_net if config.frozen_target_period > 0 else qnet
                targets = np.array([
                    compute_target(tr.reward, tr.next_hist, tr.next_pool, boot,
                                   catalog, config.gamma, tr.terminal)
                    for tr in batch
                ])
                F = np.stack([tr.hist for tr in batch])
                total = GradientBundle()
                loss = 0.0
                for j in range(1, k + 1):
                    feats = np.stack([catalog.feature_matrix(tr.slate[:j]) for tr in batch])
                    value, bundle = nets.td_value_and_grad(qnet, j, F, feats, targets)
                    loss += value
                    total.add_(bundle)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(it)
                nets.sgd_step(qnet, total, config.lr, momentum=config.momentum, velocity=velocity)
                updates += 1
                losses.append(loss / k)
        if on_iteration is not None:
            on_iteration(it, {"epsilon": eps, "updates": updates,
                              "mean_td_loss": float(np.mean(losses)) if losses else float("nan")})
    return qnet


def _additive_value_and_grad(qnet: CascadeQNet, F: np.ndarray, slate_feats: np.ndarray,
                             targets: np.ndarray):
    """Squared error of the additive slate value sum_i Q(s, a_i) against fixed targets."""
    view = ScorerNet(pw=qnet.pw, head=qnet.heads.head(1))
    cache = nets.scorer_batch(view, F, slate_feats)
    qsum = cache.scores.sum(axis=1)
    resid = qsum - targets
    value = float(np.mean(resid * resid))
    w = np.repeat((2.0 * resid / len(resid))[:, None], slate_feats.shape[1], axis=1)
    g = nets.scorer_batch_grad(view, cache, w)
    renamed = {"W": g.grads["W"], "B": g.grads["B"], "L1": g.grads["V"],
               "c1": g.grads["b"], "q1": g.grads["v"]}
    return value, GradientBundle(renamed)


def train_additive_q(env_factory: EnvFactory, config: CDQNConfig,
                     on_iteration: Callable[[int, dict], None] | None = None) -> CascadeQNet:
    """Same replay loop as train_cdqn for the additive baseline (one single-item network).

    The greedy slate is the top-k by single-item value and the bootstrap target
    uses the additive maximum, i.e. the sum of the next state's top-k values."""
    env0, user0, _ = env_factory(0)
    catalog = env0.catalog
    k = env0.config.k
    rng = np.random.default_rng(config.seed)
    qnet = nets.init_cascade_net(catalog.d, user0.m, config.n, config.hidden, 1, rng,
                                 config.activation)
    memory = ReplayMemory(config.capacity)
    velocity: dict[str, np.ndarray] = {}
    updates = 0
    episode = 0

    def additive_target(tr: Transition) -> float:
        if tr.terminal:
            return tr.reward
        s = nets.embed_history(tr.next_hist, qnet.pw)
        vals = np.sort(net_qeval(qnet, s, catalog)(1, (), tr.next_pool))[::-1]
        return tr.reward + config.gamma * float(vals[:k].sum())

    for it in range(config.iterations):
        eps = _epsilon_at(config, it)
        sessions = []
        for _ in range(config.batch_users):
            env, user, ep_seed = env_factory(episode)
            episode += 1
            sessions.append([env, user, reset(env, user, ep_seed)])
        losses = []
        for t in range(config.horizon):
            for session in sessions:
                env, user, state = session
                if rng.random() < eps:
                    slate = random_slate(state.pool, k, rng)
                else:
                    slate = additive_q_policy(qnet, state.buffer, state.pool, k, catalog)
                out = step(env, state, slate, user)
                memory.add(Transition(
                    hist=state.buffer.matrix.copy(),
                    slate=tuple(slate),
                    reward=_mode_reward(out, config),
                    next_hist=out.next_state.buffer.matrix.copy(),
                    next_pool=out.next_state.pool,
                    terminal=(t == config.horizon - 1),
                ))
                session[2] = out.next_state
            if len(memory) >= config.minibatch:
                batch = memory.sample(config.minibatch, rng)
                targets = np.array([additive_target(tr) for tr in batch])
                F = np.stack([tr.hist for tr in batch])
                feats = np.stack([catalog.feature_matrix(tr.slate) for tr in batch])
                value, bundle = _additive_value_and_grad(qnet, F, feats, targets)
                if not np.isfinite(value):
                    raise TrainingDivergedError(it)
                nets.sgd_step(qnet, bundle, config.lr, momentum=config.momentum, velocity=velocity)
                updates += 1
                losses.append(value)
        if on_iteration is not None:
            on_iteration(it, {"epsilon": eps, "updates": updates,
                              "mean_td_loss": float(np.mean(losses)) if losses else float("nan")})
    return qnet


# ---------------------------------------------------------------------------
# diagnostics and checkpoints


def constraint_diagnostic(qnet: CascadeQNet, hists: Sequence[np.ndarray],
                          pools: Sequence[Sequence[int]], catalog: ItemCatalog
                          ) -> list[tuple[int, int, float, float]]:
    """Per state and position: (state_idx, j, Q^j at the greedy prefix, Q^k at the full slate).

    For mutually consistent networks every pair lies on the diagonal."""
    rows = []
    for idx, (hist, pool) in enumerate(zip(hists, pools)):
        s = nets.embed_history(hist, qnet.pw)
        _, values = cascade_plan(net_qeval(qnet, s, catalog), pool, qnet.heads.k)
        qk = values[-1]
        for j in range(1, qnet.heads.k + 1):
            rows.append((idx, j, values[j - 1], qk))
    return rows


def save_policy(path, qnet: CascadeQNet, extra_meta: dict[str, str] | None = None) -> None:
    tensors = dict(nets.named_tensors(qnet))
    meta = {
        "kind": "cascade_policy",
        "k": str(qnet.heads.k),
        "d": str(qnet.pw.d),
        "m": str(qnet.pw.m),
        "n": str(qnet.pw.n),
        "hidden": str(qnet.heads.q[0].shape[0]),
        "activation": qnet.pw.activation.value,
    }
    if extra_meta:
        meta.update(extra_meta)
    nets.save_tensors(path, tensors, meta)


def load_policy(path) -> CascadeQNet:
    tensors, meta = nets.load_tensors(path)
    if meta.get("kind") != "cascade_policy":
        raise ValueError(f"{path}: not a policy checkpoint")
    activation = Activation(meta["activation"])
    k = int(meta["k"])
    pw = nets.PositionWeightParams(W=tensors["W"], B=tensors["B"], activation=activation)
    heads = nets.CascadeQParams(
        L=[tensors[f"L{j}"] for j in range(1, k + 1)],
        c=[tensors[f"c{j}"] for j in range(1, k + 1)],
        q=[tensors[f"q{j}"] for j in range(1, k + 1)],
        activation=activation,
    )
    return CascadeQNet(pw=pw, heads=heads)
