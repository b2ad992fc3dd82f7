"""Shallow parameterized scorers with exact hand-derived gradients.

Three architectures share one position-weighted history embedding:
  * state embedding  s = vec[act(F @ W + B)]  with F the d x m click history,
  * state+item scorer  v' act(V [s; f] + b)  used for rewards and behavior logits,
  * per-position slate scorers  q_j' act(L_j [s; f_1 .. f_j] + c_j).

Gradients for the supported losses (NLL, the two adversarial updates, squared
TD error) are computed analytically, including backprop through the embedding.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .choice import Regularizer


class Activation(Enum):
    RELU = "relu"
    ELU = "elu"


def act(z: np.ndarray, kind: Activation) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def act_grad(z: np.ndarray, kind: Activation) -> np.ndarray:
    if kind is Activation.RELU:
        return (z > 0).astype(float)
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))


@dataclass
class PositionWeightParams:
    """Position-weight embedding: W mixes history positions, B is a per-feature bias."""

    W: np.ndarray  # (m, n)
    B: np.ndarray  # (d, n)
    activation: Activation = Activation.ELU

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        if self.W.ndim != 2 or self.B.ndim != 2 or self.W.shape[1] != self.B.shape[1]:
            raise ValueError("W must be (m, n) and B (d, n) with matching n")
        if self.W.shape[1] < 1:
            raise ValueError("n must be >= 1")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.B))):
            raise ValueError("non-finite embedding parameters")

    @property
    def m(self) -> int:
        return self.W.shape[0]

    @property
    def n(self) -> int:
        return self.W.shape[1]

    @property
    def d(self) -> int:
        return self.B.shape[0]

    @property
    def out_dim(self) -> int:
        return self.d * self.n


@dataclass
class ScorerParams:
    """Single hidden layer head scoring a (state, item-features) pair."""

    V: np.ndarray  # (hidden, dn + d)
    b: np.ndarray  # (hidden,)
    v: np.ndarray  # (hidden,)
    activation: Activation = Activation.ELU

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        h = self.V.shape[0]
        if h < 1 or self.b.shape != (h,) or self.v.shape != (h,):
            raise ValueError("inconsistent head shapes")
        for t in (self.V, self.b, self.v):
            if not np.all(np.isfinite(t)):
                raise ValueError("non-finite head parameters")


@dataclass
class CascadeQParams:
    """Per-position heads; position j (1-based) consumes the state plus j item vectors."""

    L: list[np.ndarray]
    c: list[np.ndarray]
    q: list[np.ndarray]
    activation: Activation = Activation.ELU

    def __post_init__(self):
        if not (len(self.L) == len(self.c) == len(self.q)) or not self.L:
            raise ValueError("need matching non-empty L, c, q lists")
        self.L = [np.asarray(a, dtype=float) for a in self.L]
        self.c = [np.asarray(a, dtype=float) for a in self.c]
        self.q = [np.asarray(a, dtype=float) for a in self.q]

    @property
    def k(self) -> int:
        return len(self.L)

    def head(self, j: int) -> ScorerParams:
        """View of position j's tensors as a plain scorer head (arrays are shared)."""
        return ScorerParams(self.L[j - 1], self.c[j - 1], self.q[j - 1], self.activation)


@dataclass
class ScorerNet:
    """Full reward/behavior scorer: its own embedding plus a head."""

    pw: PositionWeightParams
    head: ScorerParams


@dataclass
class CascadeQNet:
    """Slate value model: one shared embedding feeding k per-position heads."""

    pw: PositionWeightParams
    heads: CascadeQParams


# ---------------------------------------------------------------------------
# forward passes


def embed_history(F: np.ndarray, pw: PositionWeightParams) -> np.ndarray:
    """Embed one d x m history matrix into a length d*n state vector.

    Columns of act(F @ W + B) are concatenated (column-major vec)."""
    F = np.asarray(F, dtype=float)
    if F.shape != (pw.d, pw.m):
        raise ValueError(f"history shape {F.shape} does not match ({pw.d}, {pw.m})")
    S = act(F @ pw.W + pw.B, pw.activation)
    return S.T.reshape(-1)


def embed_state(buffer, pw: PositionWeightParams) -> np.ndarray:
    """Embed a HistoryBuffer (see embed_history)."""
    return embed_history(buffer.matrix, pw)


def _embed_batch(F: np.ndarray, pw: PositionWeightParams):
    # F: (batch, d, m) -> state (batch, dn), plus pre-activation cache
    Ze = np.einsum("bdm,mn->bdn", F, pw.W) + pw.B[None, :, :]
    Se = act(Ze, pw.activation)
    s = Se.transpose(0, 2, 1).reshape(F.shape[0], -1)
    return s, Ze


def head_scores(head: ScorerParams, state: np.ndarray, feats: np.ndarray) -> np.ndarray:
    """Scores of each row of `feats` (slots, d) against one state vector."""
    state = np.asarray(state, dtype=float)
    feats = np.atleast_2d(np.asarray(feats, dtype=float))
    dn = head.V.shape[1] - feats.shape[1]
    if state.shape != (dn,):
        raise ValueError(f"state length {state.shape} incompatible with head input {head.V.shape[1]}")
    Vs, Vf = head.V[:, :dn], head.V[:, dn:]
    z = (Vs @ state)[None, :] + feats @ Vf.T + head.b[None, :]
    return act(z, head.activation) @ head.v


def reward_score(theta: ScorerParams, state: np.ndarray, item_features: np.ndarray) -> float:
    """Scalar reward of one item in one state."""
    return float(head_scores(theta, state, np.asarray(item_features))[0])


def behavior_logit(alpha: ScorerParams, state: np.ndarray, item_features: np.ndarray) -> float:
    """Behavior-model logit; identical computation to reward_score with its own parameters."""
    return float(head_scores(alpha, state, np.asarray(item_features))[0])


def qj_value(params: CascadeQParams, j: int, state: np.ndarray, chosen_features: Sequence[np.ndarray]) -> float:
    """Value of position j given the state and exactly j chosen item feature vectors."""
    if not (1 <= j <= params.k):
        raise ValueError(f"position {j} outside 1..{params.k}")
    if len(chosen_features) != j:
        raise ValueError(f"expected {j} feature vectors, got {len(chosen_features)}")
    x = np.concatenate([np.asarray(state, dtype=float)] + [np.asarray(f, dtype=float) for f in chosen_features])
    L, c, q = params.L[j - 1], params.c[j - 1], params.q[j - 1]
    if x.shape[0] != L.shape[1]:
        raise ValueError(f"input length {x.shape[0]} != head width {L.shape[1]}")
    return float(q @ act(L @ x + c, params.activation))


# ---------------------------------------------------------------------------
# batched forward/backward through embedding + head


@dataclass
class _ScorerCache:
    F: np.ndarray      # (batch, d, m)
    feats: np.ndarray  # (batch, slots, d)
    Ze: np.ndarray     # (batch, d, n)
    s: np.ndarray      # (batch, dn)
    z: np.ndarray      # (batch, slots, hidden)
    scores: np.ndarray  # (batch, slots)


def scorer_batch(net: ScorerNet, F: np.ndarray, feats: np.ndarray) -> _ScorerCache:
    """Forward a batch of histories against per-record display features.

    F: (batch, d, m); feats: (batch, slots, d)."""
    s, Ze = _embed_batch(F, net.pw)
    dn = net.pw.out_dim
    Vs, Vf = net.head.V[:, :dn], net.head.V[:, dn:]
    z = (s @ Vs.T)[:, None, :] + np.einsum("bsd,ld->bsl", feats, Vf) + net.head.b[None, None, :]
    scores = act(z, net.head.activation) @ net.head.v
    return _ScorerCache(F=F, feats=feats, Ze=Ze, s=s, z=z, scores=scores)


def scorer_batch_grad(net: ScorerNet, cache: _ScorerCache, slot_w: np.ndarray) -> "GradientBundle":
    """Gradient of sum_{b,s} slot_w[b,s] * score[b,s] w.r.t. all net parameters."""
    dn = net.pw.out_dim
    Vs = net.head.V[:, :dn]
    h = act(cache.z, net.head.activation)
    dv = np.einsum("bs,bsl->l", slot_w, h)
    dz = slot_w[:, :, None] * act_grad(cache.z, net.head.activation) * net.head.v[None, None, :]
    db = dz.sum(axis=(0, 1))
    dVf = np.einsum("bsl,bsd->ld", dz, cache.feats)
    dzb = dz.sum(axis=1)                      # (batch, hidden)
    dVs = dzb.T @ cache.s                     # (hidden, dn)
    ds = dzb @ Vs                             # (batch, dn)
    batch, d, n = cache.Ze.shape
    dSe = ds.reshape(batch, n, d).transpose(0, 2, 1)
    dZe = dSe * act_grad(cache.Ze, net.pw.activation)
    dW = np.einsum("bdm,bdn->mn", cache.F, dZe)
    dB = dZe.sum(axis=0)
    return GradientBundle({"W": dW, "B": dB, "V": np.concatenate([dVs, dVf], axis=1), "b": db, "v": dv})


# ---------------------------------------------------------------------------
# losses and their exact gradients


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _reg_rows(phi: np.ndarray, kind: Regularizer) -> np.ndarray:
    if kind is Regularizer.SHANNON_ENTROPY:
        safe = np.clip(phi, 1e-300, None)
        return np.sum(np.where(phi > 0, phi * np.log(safe), 0.0), axis=1)
    return np.sum(phi * phi, axis=1)


def nll_value_and_grad(net: ScorerNet, F, feats, chosen, eta: float):
    """Mean negative log-likelihood of the observed choices under softmax(eta * scores)."""
    chosen = np.asarray(chosen, dtype=int)
    cache = scorer_batch(net, F, feats)
    logits = eta * cache.scores
    zmax = logits.max(axis=1)
    lse = zmax + np.log(np.sum(np.exp(logits - zmax[:, None]), axis=1))
    batch = logits.shape[0]
    rows = np.arange(batch)
    value = float(np.mean(lse - logits[rows, chosen]))
    p = _softmax_rows(logits)
    w = p.copy()
    w[rows, chosen] -= 1.0
    w *= eta / batch
    return value, scorer_batch_grad(net, cache, w)


def minimax_reward_value_and_grad(net: ScorerNet, F, feats, chosen, phi: np.ndarray,
                                  eta: float, regularizer: Regularizer):
    """Adversarial update for the reward scorer, with the generator phi held fixed.

    Value is the mean per-record objective  <phi, r> - R(phi)/eta - r_true;
    the gradient descends it (phi is a constant here)."""
    chosen = np.asarray(chosen, dtype=int)
    cache = scorer_batch(net, F, feats)
    batch = cache.scores.shape[0]
    rows = np.arange(batch)
    value = float(np.mean(
        np.sum(phi * cache.scores, axis=1)
        - _reg_rows(phi, regularizer) / eta
        - cache.scores[rows, chosen]
    ))
    w = phi.copy()
    w[rows, chosen] -= 1.0
    w /= batch
    return value, scorer_batch_grad(net, cache, w)


def minimax_behavior_value_and_grad(net: ScorerNet, F, feats, rewards: np.ndarray,
                                    eta: float, regularizer: Regularizer):
    """Generator objective  <phi_alpha, r> - R(phi_alpha)/eta  with rewards held fixed.

    phi_alpha is the softmax of the behavior logits; the returned gradient is of
    the mean objective w.r.t. the behavior parameters (caller ascends)."""
    cache = scorer_batch(net, F, feats)
    phi = _softmax_rows(cache.scores)
    value = float(np.mean(np.sum(phi * rewards, axis=1) - _reg_rows(phi, regularizer) / eta))
    if regularizer is Regularizer.SHANNON_ENTROPY:
        g = rewards - (np.log(np.clip(phi, 1e-300, None)) + 1.0) / eta
    else:
        g = rewards - 2.0 * phi / eta
    w = phi * (g - np.sum(phi * g, axis=1, keepdims=True))
    w /= cache.scores.shape[0]
    return value, scorer_batch_grad(net, cache, w)


def td_value_and_grad(qnet: CascadeQNet, j: int, F, slate_feats: np.ndarray, targets: np.ndarray):
    """Mean squared TD error of position j against fixed targets.

    slate_feats: (batch, j, d) features of the first j slate items."""
    if slate_feats.shape[1] != j:
        raise ValueError(f"expected {j} item vectors per row, got {slate_feats.shape[1]}")
    batch = slate_feats.shape[0]
    s, Ze = _embed_batch(np.asarray(F, dtype=float), qnet.pw)
    x = np.concatenate([s, slate_feats.reshape(batch, -1)], axis=1)
    L, c, q = qnet.heads.L[j - 1], qnet.heads.c[j - 1], qnet.heads.q[j - 1]
    z = x @ L.T + c[None, :]
    h = act(z, qnet.heads.activation)
    qvals = h @ q
    resid = qvals - np.asarray(targets, dtype=float)
    value = float(np.mean(resid * resid))
    coef = 2.0 * resid / batch
    dq = h.T @ coef
    dz = coef[:, None] * act_grad(z, qnet.heads.activation) * q[None, :]
    dL = dz.T @ x
    dc = dz.sum(axis=0)
    dn = qnet.pw.out_dim
    ds = dz @ L[:, :dn]
    d, n = qnet.pw.d, qnet.pw.n
    dSe = ds.reshape(batch, n, d).transpose(0, 2, 1)
    dZe = dSe * act_grad(Ze, qnet.pw.activation)
    dW = np.einsum("bdm,bdn->mn", np.asarray(F, dtype=float), dZe)
    dB = dZe.sum(axis=0)
    return value, GradientBundle({"W": dW, "B": dB, f"L{j}": dL, f"c{j}": dc, f"q{j}": dq})


LOSS_KINDS = ("nll", "minimax-reward", "minimax-behavior", "squared-td")


def grad(loss_kind: str, params, inputs: dict) -> "GradientBundle":
    """Analytic gradient for one of the fixed loss kinds.

    inputs keys:
      nll: F, feats, chosen, eta
      minimax-reward: F, feats, chosen, phi, eta, regularizer
      minimax-behavior: F, feats, rewards, eta, regularizer
      squared-td: j, F, slate_feats, targets
    """
    if loss_kind == "nll":
        return nll_value_and_grad(params, **inputs)[1]
    if loss_kind == "minimax-reward":
        return minimax_reward_value_and_grad(params, **inputs)[1]
    if loss_kind == "minimax-behavior":
        return minimax_behavior_value_and_grad(params, **inputs)[1]
    if loss_kind == "squared-td":
        return td_value_and_grad(params, **inputs)[1]
    raise ValueError(f"unsupported loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")


# ---------------------------------------------------------------------------
# parameter plumbing: bundles, SGD, init, checkpoints


@dataclass
class GradientBundle:
    """Named gradient arrays, shape-congruent with the parameters they address."""

    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def add_(self, other: "GradientBundle") -> "GradientBundle":
        for name, g in other.grads.items():
            if name in self.grads:
                self.grads[name] = self.grads[name] + g
            else:
                self.grads[name] = g.copy()
        return self

    def scale_(self, a: float) -> "GradientBundle":
        for name in self.grads:
            self.grads[name] = self.grads[name] * a
        return self

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(g))) for g in self.grads.values()), default=0.0)

    @staticmethod
    def zeros_like(params) -> "GradientBundle":
        return GradientBundle({name: np.zeros_like(t) for name, t in named_tensors(params).items()})


def named_tensors(params) -> dict[str, np.ndarray]:
    """Live name -> array views of a parameter container."""
    if isinstance(params, PositionWeightParams):
        return {"W": params.W, "B": params.B}
    if isinstance(params, ScorerParams):
        return {"V": params.V, "b": params.b, "v": params.v}
    if isinstance(params, CascadeQParams):
        out = {}
        for j in range(1, params.k + 1):
            out[f"L{j}"] = params.L[j - 1]
            out[f"c{j}"] = params.c[j - 1]
            out[f"q{j}"] = params.q[j - 1]
        return out
    if isinstance(params, ScorerNet):
        return {**named_tensors(params.pw), **named_tensors(params.head)}
    if isinstance(params, CascadeQNet):
        return {**named_tensors(params.pw), **named_tensors(params.heads)}
    raise TypeError(f"no tensor registry for {type(params).__name__}")


def sgd_step(params, bundle: GradientBundle, learning_rate: float,
             ascend: bool = False, momentum: float = 0.0,
             velocity: dict[str, np.ndarray] | None = None):
    """In-place SGD update p <- p -/+ lr * g; returns params.

    With momentum > 0 the caller owns `velocity` (name -> array) across steps."""
    tensors = named_tensors(params)
    sign = 1.0 if ascend else -1.0
    for name, g in bundle.grads.items():
        if name not in tensors:
            raise KeyError(f"gradient {name!r} has no matching parameter")
        t = tensors[name]
        if t.shape != g.shape:
            raise ValueError(f"shape mismatch for {name}: {t.shape} vs {g.shape}")
        step = g
        if momentum > 0.0:
            if velocity is None:
                raise ValueError("momentum requires a velocity dict")
            vel = velocity.setdefault(name, np.zeros_like(t))
            vel *= momentum
            vel += g
            step = vel
        t += sign * learning_rate * step
    return params


def clone_params(params):
    return copy.deepcopy(params)


def _uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan = shape[0] + (shape[1] if len(shape) > 1 else 1)
    s = np.sqrt(6.0 / fan)
    return rng.uniform(-s, s, size=shape)


def init_position_weight(d: int, m: int, n: int, rng: np.random.Generator,
                         activation: Activation = Activation.ELU) -> PositionWeightParams:
    return PositionWeightParams(W=_uniform(rng, (m, n)), B=_uniform(rng, (d, n)), activation=activation)


def init_scorer_head(in_dim: int, hidden: int, rng: np.random.Generator,
                     activation: Activation = Activation.ELU) -> ScorerParams:
    return ScorerParams(V=_uniform(rng, (hidden, in_dim)), b=_uniform(rng, (hidden,)),
                        v=_uniform(rng, (hidden,)), activation=activation)


def init_scorer_net(d: int, m: int, n: int, hidden: int, rng: np.random.Generator,
                    activation: Activation = Activation.ELU) -> ScorerNet:
    pw = init_position_weight(d, m, n, rng, activation)
    head = init_scorer_head(d * n + d, hidden, rng, activation)
    return ScorerNet(pw=pw, head=head)


def init_cascade_net(d: int, m: int, n: int, hidden: int, k: int, rng: np.random.Generator,
                     activation: Activation = Activation.ELU) -> CascadeQNet:
    pw = init_position_weight(d, m, n, rng, activation)
    L, c, q = [], [], []
    for j in range(1, k + 1):
        L.append(_uniform(rng, (hidden, d * n + d * j)))
        c.append(_uniform(rng, (hidden,)))
        q.append(_uniform(rng, (hidden,)))
    return CascadeQNet(pw=pw, heads=CascadeQParams(L=L, c=c, q=q, activation=activation))


# ---------------------------------------------------------------------------
# checkpoint files: versioned text, row-major values, exact round trip

_CKPT_HEADER = "ckpt v1"


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    lines = [_CKPT_HEADER]
    for key, val in (meta or {}).items():
        lines.append(f"meta {key} {val}")
    for name, t in tensors.items():
        t = np.asarray(t, dtype=float)
        dims = " ".join(str(s) for s in t.shape)
        lines.append(f"tensor {name} {t.ndim} {dims}".rstrip())
        lines.append(" ".join(format(x, ".17g") for x in t.reshape(-1)))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _CKPT_HEADER:
        raise ValueError(f"{path}: not a checkpoint file")
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    i = 1
    while i < len(lines):
        line = lines[i]
        if line.startswith("meta "):
            _, key, val = line.split(" ", 2)
            meta[key] = val
            i += 1
        elif line.startswith("tensor "):
            parts = line.split()
            name, ndim = parts[1], int(parts[2])
            shape = tuple(int(x) for x in parts[3:3 + ndim])
            vals = np.array([float(x) for x in lines[i + 1].split()])
            tensors[name] = vals.reshape(shape)
            i += 2
        elif not line.strip():
            i += 1
        else:
            raise ValueError(f"{path}: unexpected line {line!r}")
    return tensors, meta


# ---------------------------------------------------------------------------
# finite-difference oracle used by tests and the gradcheck command


def finite_difference_grad(loss_fn: Callable[[], float], params, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central finite differences of loss_fn() w.r.t. every parameter coordinate."""
    out = {}
    for name, t in named_tensors(params).items():
        g = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            orig = t[idx]
            t[idx] = orig + h
            up = loss_fn()
            t[idx] = orig - h
            down = loss_fn()
            t[idx] = orig
            g[idx] = (up - down) / (2.0 * h)
        out[name] = g
    return out


def _rel_err(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray]) -> float:
    worst = 0.0
    for name, g in analytic.items():
        fd = numeric[name]
        denom = np.maximum(1.0, np.abs(g) + np.abs(fd))
        worst = max(worst, float(np.max(np.abs(g - fd) / denom)))
    return worst


def run_gradient_check(seed: int = 0, trials: int = 100, dims_max: int = 6, h: float = 1e-5) -> float:
    """Compare every analytic gradient against central differences on random instances.

    Cycles through the four loss kinds; returns the worst relative error seen."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(trials):
        d, m, n, hid = (int(rng.integers(1, dims_max + 1)) for _ in range(4))
        batch, slots = int(rng.integers(1, 4)), int(rng.integers(2, 5))
        eta = float(rng.uniform(0.5, 2.0))
        F = rng.standard_normal((batch, d, m))
        feats = rng.standard_normal((batch, slots, d))
        kind = LOSS_KINDS[trial % len(LOSS_KINDS)]
        reg = Regularizer.SHANNON_ENTROPY if trial % 2 == 0 else Regularizer.L2
        if kind == "squared-td":
            k = int(rng.integers(1, 4))
            j = int(rng.integers(1, k + 1))
            qnet = init_cascade_net(d, m, n, hid, k, rng)
            slate = rng.standard_normal((batch, j, d))
            targets = rng.standard_normal(batch)
            analytic = td_value_and_grad(qnet, j, F, slate, targets)[1]
            numeric = finite_difference_grad(
                lambda: td_value_and_grad(qnet, j, F, slate, targets)[0], qnet, h=h)
        else:
            net = init_scorer_net(d, m, n, hid, rng)
            chosen = rng.integers(0, slots, size=batch)
            if kind == "nll":
                analytic = nll_value_and_grad(net, F, feats, chosen, eta)[1]
                numeric = finite_difference_grad(
                    lambda: nll_value_and_grad(net, F, feats, chosen, eta)[0], net, h=h)
            elif kind == "minimax-reward":
                raw = rng.random((batch, slots))
                phi = raw / raw.sum(axis=1, keepdims=True)
                analytic = minimax_reward_value_and_grad(net, F, feats, chosen, phi, eta, reg)[1]
                numeric = finite_difference_grad(
                    lambda: minimax_reward_value_and_grad(net, F, feats, chosen, phi, eta, reg)[0],
                    net, h=h)
            else:
                rewards = rng.standard_normal((batch, slots))
                analytic = minimax_behavior_value_and_grad(net, F, feats, rewards, eta, reg)[1]
                numeric = finite_difference_grad(
                    lambda: minimax_behavior_value_and_grad(net, F, feats, rewards, eta, reg)[0],
                    net, h=h)
        worst = max(worst, _rel_err(analytic.grads, numeric))
    return worst
