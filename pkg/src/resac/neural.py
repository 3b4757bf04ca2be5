"""Small numpy neural toolkit with hand-written gradients.

Batches are row-major: inputs are ``(B, features)``. Every network exposes
``params()`` as an ordered list of arrays, and gradients are returned as lists
in the same order, so the optimizer, clipping, target sync and checkpointing
stay generic.
"""

from __future__ import annotations

import base64
import copy
import math
from dataclasses import dataclass, field

import numpy as np

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
TANH_EPS = 1e-6
HIDDEN = (64, 64, 64)


class Mlp:
    """ReLU MLP with an identity output layer."""

    def __init__(self, sizes: tuple[int, ...] | list[int], rng: np.random.Generator | None = None):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer widths {sizes}")
        self.sizes = sizes
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            bound = math.sqrt((1.0 if last else 6.0) / fan_in)
            if rng is None:
                w = np.zeros((fan_out, fan_in))
            else:
                w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ValueError(f"expected input of shape (B, {self.sizes[0]}), got {x.shape}")
        cache = [x]
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            if i < self.num_layers - 1:
                cache.append(z)
                h = np.maximum(z, 0.0)
            else:
                h = z
        return h, cache

    def backward(self, cache: list[np.ndarray], grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Reverse pass. Returns (parameter grads in ``params()`` order, input grad)."""
        x, pre = cache[0], cache[1:]
        g = np.asarray(grad_out, dtype=np.float64)
        grads: list[np.ndarray] = [None] * (2 * self.num_layers)  # type: ignore[list-item]
        for i in range(self.num_layers - 1, -1, -1):
            h_in = x if i == 0 else np.maximum(pre[i - 1], 0.0)
            grads[2 * i] = g.T @ h_in
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i]
            if i > 0:
                g = g * (pre[i - 1] > 0)
        return grads, g


class EmbeddingTable:
    def __init__(self, cardinality: int, rng: np.random.Generator | None = None):
        if cardinality < 1:
            raise ValueError("cardinality must be >= 1")
        self.cardinality = int(cardinality)
        self.dim = embedding_dim(cardinality)
        if rng is None:
            self.table = np.zeros((self.cardinality, self.dim))
        else:
            self.table = rng.uniform(-0.05, 0.05, size=(self.cardinality, self.dim))

    def lookup(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.cardinality):
            raise IndexError(f"embedding index out of range [0, {self.cardinality})")
        return self.table[idx]

    def backward(self, idx: np.ndarray, grad: np.ndarray) -> np.ndarray:
        out = np.zeros_like(self.table)
        np.add.at(out, np.asarray(idx, dtype=np.int64), grad)
        return out


def embedding_dim(cardinality: int) -> int:
    return max(1, min(50, int(cardinality) // 2))


class FeatureEncoder:
    """Continuous features concatenated with one learnable embedding per categorical column."""

    def __init__(self, num_continuous: int, cardinalities: tuple[int, ...], rng: np.random.Generator | None = None):
        self.num_continuous = int(num_continuous)
        self.cardinalities = tuple(int(c) for c in cardinalities)
        self.tables = [EmbeddingTable(c, rng) for c in self.cardinalities]

    @property
    def out_dim(self) -> int:
        return self.num_continuous + sum(t.dim for t in self.tables)

    def params(self) -> list[np.ndarray]:
        return [t.table for t in self.tables]

    def encode(self, cont: np.ndarray, cats: np.ndarray) -> np.ndarray:
        cats = np.asarray(cats, dtype=np.int64)
        parts = [np.asarray(cont, dtype=np.float64)]
        parts += [t.lookup(cats[:, j]) for j, t in enumerate(self.tables)]
        return np.concatenate(parts, axis=1)

    def backward(self, cats: np.ndarray, grad_x: np.ndarray) -> list[np.ndarray]:
        grads = []
        col = self.num_continuous
        for j, t in enumerate(self.tables):
            grads.append(t.backward(cats[:, j], grad_x[:, col : col + t.dim]))
            col += t.dim
        return grads


class CriticNet:
    """Q(s, a): encoded state concatenated with the normalized action, fed to an MLP."""

    def __init__(
        self,
        num_continuous: int,
        cardinalities: tuple[int, ...],
        action_dim: int = 1,
        hidden: tuple[int, ...] = HIDDEN,
        rng: np.random.Generator | None = None,
    ):
        self.encoder = FeatureEncoder(num_continuous, cardinalities, rng)
        self.action_dim = int(action_dim)
        self.mlp = Mlp([self.encoder.out_dim + self.action_dim, *hidden, 1], rng)

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.mlp.params()

    def forward(self, cont, cats, action) -> tuple[np.ndarray, tuple]:
        cats = np.asarray(cats, dtype=np.int64)
        x = np.concatenate([self.encoder.encode(cont, cats), np.asarray(action, dtype=np.float64)], axis=1)
        out, cache = self.mlp.forward(x)
        return out[:, 0], (cats, cache)

    def backward(self, cache: tuple, grad_q: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Returns (parameter grads, action grad)."""
        cats, mlp_cache = cache
        mlp_grads, gx = self.mlp.backward(mlp_cache, np.asarray(grad_q)[:, None])
        enc_dim = self.encoder.out_dim
        emb_grads = self.encoder.backward(cats, gx[:, :enc_dim])
        return emb_grads + mlp_grads, gx[:, enc_dim:]


@dataclass
class PolicySample:
    action: np.ndarray  # squashed, in (-1, 1)
    log_prob: np.ndarray  # (B,)
    cache: tuple = field(repr=False, default=())


class PolicyNet:
    """Squashed-Gaussian policy: the MLP emits (mean, raw log-std) per action dimension."""

    def __init__(
        self,
        num_continuous: int,
        cardinalities: tuple[int, ...],
        action_dim: int = 1,
        hidden: tuple[int, ...] = HIDDEN,
        rng: np.random.Generator | None = None,
    ):
        self.encoder = FeatureEncoder(num_continuous, cardinalities, rng)
        self.action_dim = int(action_dim)
        self.mlp = Mlp([self.encoder.out_dim, *hidden, 2 * self.action_dim], rng)

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.mlp.params()

    def distribution(self, cont, cats) -> tuple[np.ndarray, np.ndarray, tuple]:
        cats = np.asarray(cats, dtype=np.int64)
        out, cache = self.mlp.forward(self.encoder.encode(cont, cats))
        d = self.action_dim
        mean, raw = out[:, :d], out[:, d:]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std, (cats, cache, raw)

    def deterministic(self, cont, cats) -> np.ndarray:
        mean, _, _ = self.distribution(cont, cats)
        return np.tanh(mean)

    def sample(self, cont, cats, noise: np.ndarray) -> PolicySample:
        """Reparameterized draw a = tanh(mean + std * noise) with its log-density."""
        mean, log_std, dist_cache = self.distribution(cont, cats)
        std = np.exp(log_std)
        u = mean + std * noise
        a = np.tanh(u)
        gauss = -0.5 * noise**2 - log_std - 0.5 * math.log(2.0 * math.pi)
        log_prob = np.sum(gauss - np.log(1.0 - a**2 + TANH_EPS), axis=1)
        return PolicySample(a, log_prob, (dist_cache, noise, std, a))

    def backward(self, sample: PolicySample, grad_action: np.ndarray, grad_log_prob: np.ndarray) -> list[np.ndarray]:
        (cats, mlp_cache, raw), noise, std, a = sample.cache
        one_m = 1.0 - a**2
        g_lp = np.asarray(grad_log_prob, dtype=np.float64)[:, None]
        g_u = np.asarray(grad_action) * one_m + g_lp * (2.0 * a * one_m / (one_m + TANH_EPS))
        g_mean = g_u
        g_log_std = g_u * std * noise - g_lp
        g_raw = g_log_std * ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX))
        mlp_grads, gx = self.mlp.backward(mlp_cache, np.concatenate([g_mean, g_raw], axis=1))
        return self.encoder.backward(cats, gx) + mlp_grads


def squashed_log_prob(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Log-density in squashed space of a = tanh(u), u ~ N(mean, exp(log_std)^2)."""
    std = np.exp(log_std)
    z = (u - mean) / std
    a = np.tanh(u)
    per_dim = -0.5 * z**2 - log_std - 0.5 * math.log(2.0 * math.pi) - np.log(1.0 - a**2 + TANH_EPS)
    return np.sum(np.atleast_2d(per_dim), axis=-1)


def sample_squashed_action(
    policy: PolicyNet, cont, cats, rng: np.random.Generator, h_max: float
) -> tuple[np.ndarray, np.ndarray, PolicySample]:
    """Draw holding actions in [0, h_max] plus the log-prob of the underlying (-1, 1) action."""
    cont = np.atleast_2d(cont)
    noise = rng.standard_normal((cont.shape[0], policy.action_dim))
    s = policy.sample(cont, np.atleast_2d(cats), noise)
    return scale_action(s.action, h_max), s.log_prob, s


def scale_action(a: np.ndarray, h_max: float) -> np.ndarray:
    return np.clip((np.asarray(a) + 1.0) * 0.5 * h_max, 0.0, h_max)


def unscale_action(hold: np.ndarray, h_max: float) -> np.ndarray:
    return np.asarray(hold, dtype=np.float64) / h_max * 2.0 - 1.0


# --- optimization helpers -------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 1e-5, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr, **kw)

    def arrays(self) -> list[np.ndarray]:
        return self.m + self.v


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """Bias-corrected Adam, applied in place to ``params`` (also returned)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"grad shape {g.shape} does not match param shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def global_norm(grads: list[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_global_norm(grads: list[np.ndarray], max_norm: float = 1.0) -> list[np.ndarray]:
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return [g * scale for g in grads]


def l1_norm_and_subgradient(net: Mlp) -> tuple[float, list[np.ndarray]]:
    """Sum of entrywise |W| over weight matrices (biases excluded) and sign(W)."""
    total = float(sum(np.abs(w).sum() for w in net.weights))
    return total, [np.sign(w) for w in net.weights]


def soft_update(target: list[np.ndarray], online: list[np.ndarray], tau: float) -> None:
    for t, o in zip(target, online):
        t *= 1.0 - tau
        t += tau * o


# --- Lipschitz sensitivity ------------------------------------------------------------------


@dataclass
class LipschitzReport:
    trials: int
    bound: float
    max_ratio: float
    violations: int

    @property
    def passed(self) -> bool:
        return self.violations == 0


def l1_lipschitz_bound(net: Mlp) -> float:
    """Product over layers of ||vec(W_l)||_1, an upper bound on the max-norm Lipschitz constant."""
    return float(np.prod([np.abs(w).sum() for w in net.weights]))


def verify_lipschitz_bound(
    net: Mlp, trials: int, radius: float, rng: np.random.Generator, input_scale: float = 1.0
) -> LipschitzReport:
    """Check |f(x + d) - f(x)| <= radius * prod ||vec(W_l)||_1 for random x and ||d||_inf <= radius.

    Half the perturbations sit on a corner of the max-norm ball, which is where
    the bound is approached for the first layer.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    bound = l1_lipschitz_bound(net)
    x = rng.normal(0.0, input_scale, size=(trials, net.sizes[0]))
    d = rng.uniform(-radius, radius, size=x.shape)
    corner = rng.random(trials) < 0.5
    d[corner] = radius * np.sign(d[corner])
    f0, _ = net.forward(x)
    f1, _ = net.forward(x + d)
    change = np.max(np.abs(f1 - f0), axis=1)
    limit = radius * bound
    # relative slack only absorbs floating-point rounding in the forward passes
    violations = int(np.sum(change > limit * (1 + 1e-12) + 1e-300))
    ratio = float(np.max(change / limit)) if limit > 0 else (0.0 if np.all(change == 0) else math.inf)
    return LipschitzReport(trials, bound, ratio, violations)


# --- serialization --------------------------------------------------------------------------


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(doc: dict) -> np.ndarray:
    raw = base64.b64decode(doc["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(doc["shape"]).astype(np.float64)


def load_into(params: list[np.ndarray], blobs: list[dict]) -> None:
    if len(params) != len(blobs):
        raise ValueError(f"expected {len(params)} arrays, got {len(blobs)}")
    for p, blob in zip(params, blobs):
        arr = decode_array(blob)
        if arr.shape != p.shape:
            raise ValueError(f"shape mismatch: checkpoint {arr.shape} vs network {p.shape}")
        p[...] = arr


def clone(net):
    return copy.deepcopy(net)
