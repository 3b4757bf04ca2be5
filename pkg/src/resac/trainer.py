"""Ensemble soft actor-critic training for corridor holding control.

One update *trigger* fires every ``update_every`` environment steps. A trigger
runs two critic rounds (fresh batch each), one actor + temperature round, then
blends the target critics towards the online ones.

Modes
-----
``resac``           penalized ensemble target, L1 + disagreement critic loss, LCB actor
``sac``             twin critics, min aggregation, no penalties
``epistemic_only``  ``resac`` with ``lambda_ale = 0``
``aleatoric_only``  ``resac`` with ``lambda_epi = beta_lcb = beta_ood = 0`` and two critics
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import neural as nn
from .sim import CorridorConfig, CorridorSim, Observation, fmt

MODES = ("resac", "sac", "epistemic_only", "aleatoric_only")
NUM_CONTINUOUS = 3
ACTION_DIM = 1
SPEED_SCALE = 10.0
METRIC_COLUMNS = [
    "episode", "cum_reward", "q_mean", "q_2sigma", "kappa", "mean_gamma_epi", "alpha", "clamped_actions",
]


class NumericalHalt(RuntimeError):
    """Raised when a loss, target or parameter stops being finite."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class TrainerConfig:
    K: int = 10
    lr: float = 1e-5
    batch_size: int = 2048
    gamma: float = 0.99
    tau_sync: float = 0.01
    lambda_ale: float = 0.01
    lambda_epi: float = 0.005
    beta_lcb: float = -2.0
    beta_ood: float = 0.01
    alpha_init: float = 0.2
    alpha_max: float = 0.6
    target_entropy: float = -float(ACTION_DIM)
    grad_clip: float = 1.0
    critic_rounds: int = 2
    actor_rounds: int = 1
    update_every: int = 5
    warmup_steps: int = 0
    episodes: int = 500
    eval_rollouts: int = 10
    mode: str = "resac"
    aggregation: str | None = None  # "mean" | "min"; None picks the mode's convention
    aleatoric_target_bonus: bool = True
    buffer_capacity: int = 1_000_000
    hidden: tuple[int, ...] = nn.HIDDEN
    checkpoint_every: int = 25
    probe_size: int = 512

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode: expected one of {MODES}, got {self.mode!r}")
        if self.aggregation not in (None, "mean", "min"):
            problems.append("aggregation: expected 'mean', 'min' or null")
        if self.K < 2:
            problems.append("K: ensemble needs at least 2 critics")
        for name in ("lr", "tau_sync", "lambda_ale", "lambda_epi", "beta_ood", "grad_clip", "alpha_max"):
            if getattr(self, name) < 0:
                problems.append(f"{name}: must be >= 0")
        if not (0 <= self.gamma < 1):
            problems.append("gamma: must lie in [0, 1)")
        if not (0 < self.alpha_init):
            problems.append("alpha_init: must be > 0")
        if self.tau_sync > 1:
            problems.append("tau_sync: must be <= 1")
        for name in ("batch_size", "update_every", "buffer_capacity", "probe_size", "checkpoint_every"):
            if getattr(self, name) < 1:
                problems.append(f"{name}: must be >= 1")
        if self.critic_rounds < 0 or self.actor_rounds < 0 or self.episodes < 0 or self.eval_rollouts < 0:
            problems.append("round and episode counts must be >= 0")
        if problems:
            raise ValueError("invalid trainer config:\n  " + "\n  ".join(problems))

    def resolved(self) -> "TrainerConfig":
        """Apply the mode's fixed overrides."""
        if self.mode == "sac":
            return replace(
                self, K=2, lambda_ale=0.0, lambda_epi=0.0, beta_lcb=0.0, beta_ood=0.0,
                aggregation=self.aggregation or "min",
            )
        agg = self.aggregation or "mean"
        if self.mode == "epistemic_only":
            return replace(self, lambda_ale=0.0, aggregation=agg)
        if self.mode == "aleatoric_only":
            return replace(self, lambda_epi=0.0, beta_lcb=0.0, beta_ood=0.0, K=2, aggregation=agg)
        return replace(self, aggregation=agg)

    def to_json(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "TrainerConfig":
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown trainer config fields: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> "TrainerConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


def smoke_trainer_config(**overrides) -> TrainerConfig:
    """Desk-scale settings: a narrower net, larger steps and a cooler start than the full-scale defaults."""
    kw = dict(
        K=5, lr=1e-3, batch_size=256, hidden=(64, 64), alpha_init=0.05, aleatoric_target_bonus=False,
        episodes=50, warmup_steps=1000, checkpoint_every=25,
    )
    kw.update(overrides)
    return TrainerConfig(**kw)


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named consumer of randomness."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()), *extra)))


def episode_seed(seed: int, episode: int) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(b"env"), episode))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def encode_observation(obs: Observation, tau: float) -> tuple[np.ndarray, np.ndarray]:
    cont = np.array([obs.h_f / tau, obs.h_b / tau, obs.v / SPEED_SCALE])
    return cont, np.array(obs.categorical, dtype=np.int64)


# --- replay buffer --------------------------------------------------------------------------


@dataclass
class Batch:
    cont: np.ndarray
    cats: np.ndarray
    action: np.ndarray  # normalized, (B, 1)
    reward: np.ndarray
    next_cont: np.ndarray
    next_cats: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return len(self.reward)


class ReplayBuffer:
    """Ring buffer that grows its storage on demand up to ``capacity``."""

    FIELDS = {
        "cont": (NUM_CONTINUOUS,), "cats": (4,), "action": (ACTION_DIM,), "hold": (ACTION_DIM,),
        "reward": (), "next_cont": (NUM_CONTINUOUS,), "next_cats": (4,), "done": (),
    }

    def __init__(self, capacity: int, initial: int = 4096):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.size = 0
        self.head = 0  # next slot to write
        n = min(self.capacity, initial)
        self.data = {
            k: np.zeros((n, *shape), dtype=np.int64 if "cats" in k else np.float64)
            for k, shape in self.FIELDS.items()
        }

    def __len__(self) -> int:
        return self.size

    def _grow(self) -> None:
        cur = len(self.data["reward"])
        new = min(self.capacity, cur * 2)
        for k, arr in self.data.items():
            bigger = np.zeros((new, *arr.shape[1:]), dtype=arr.dtype)
            bigger[:cur] = arr
            self.data[k] = bigger

    def add(self, cont, cats, action, hold, reward, next_cont, next_cats, done) -> None:
        values = dict(
            cont=cont, cats=cats, action=action, hold=hold, reward=reward,
            next_cont=next_cont, next_cats=next_cats, done=float(done),
        )
        for k in ("cont", "action", "hold", "reward", "next_cont"):
            if not np.all(np.isfinite(values[k])):
                raise ValueError(f"non-finite {k} in transition")
        if self.head >= len(self.data["reward"]):
            self._grow()
        for k, v in values.items():
            self.data[k][self.head] = v
        self.head = (self.head + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, size=n)

    def sample(self, rng: np.random.Generator, n: int) -> Batch:
        idx = self.sample_indices(rng, n)
        d = self.data
        return Batch(
            d["cont"][idx], d["cats"][idx], d["action"][idx], d["reward"][idx],
            d["next_cont"][idx], d["next_cats"][idx], d["done"][idx],
        )

    def save(self, path: str | Path) -> None:
        n = len(self.data["reward"])
        np.savez_compressed(
            path, size=self.size, head=self.head, capacity=self.capacity,
            **{k: v[: max(self.size, min(self.head, n))] for k, v in self.data.items()},
        )

    @classmethod
    def load(cls, path: str | Path) -> "ReplayBuffer":
        with np.load(path) as z:
            buf = cls(int(z["capacity"]), initial=max(1, len(z["reward"])))
            for k in cls.FIELDS:
                arr = z[k]
                buf.data[k][: len(arr)] = arr
            buf.size = int(z["size"])
            buf.head = int(z["head"])
        return buf


# --- agent ----------------------------------------------------------------------------------


class Agent:
    """Policy, K online critics, their frozen targets, optimizers and temperature."""

    def __init__(self, cfg: TrainerConfig, cardinalities: tuple[int, ...], seed: int):
        self.cfg = cfg
        self.cardinalities = tuple(int(c) for c in cardinalities)
        self.policy = nn.PolicyNet(NUM_CONTINUOUS, self.cardinalities, ACTION_DIM, cfg.hidden, substream(seed, "policy-init"))
        self.critics = [
            nn.CriticNet(NUM_CONTINUOUS, self.cardinalities, ACTION_DIM, cfg.hidden, substream(seed, "critic-init", k))
            for k in range(cfg.K)
        ]
        self.targets = [nn.clone(c) for c in self.critics]
        self.policy_opt = nn.AdamState.for_params(self.policy.params(), lr=cfg.lr)
        self.critic_opts = [nn.AdamState.for_params(c.params(), lr=cfg.lr) for c in self.critics]
        self.log_alpha = np.array([math.log(min(cfg.alpha_init, cfg.alpha_max))])
        self.alpha_opt = nn.AdamState.for_params([self.log_alpha], lr=cfg.lr)

    @property
    def K(self) -> int:
        return len(self.critics)

    @property
    def alpha(self) -> float:
        return float(math.exp(self.log_alpha[0]))

    def heads(self, nets, cont, cats, action) -> tuple[np.ndarray, list]:
        qs, caches = [], []
        for net in nets:
            q, cache = net.forward(cont, cats, action)
            qs.append(q)
            caches.append(cache)
        return np.stack(qs), caches

    def l1_total(self) -> float:
        """Mean over online critics of the summed absolute weights."""
        return float(np.mean([nn.l1_norm_and_subgradient(c.mlp)[0] for c in self.critics]))

    def act(self, obs: Observation, tau: float, h_max: float, rng: np.random.Generator | None) -> tuple[float, float]:
        """Returns (normalized action, hold seconds). ``rng=None`` acts deterministically."""
        cont, cats = encode_observation(obs, tau)
        if rng is None:
            a = float(self.policy.deterministic(cont[None], cats[None])[0, 0])
        else:
            noise = rng.standard_normal((1, ACTION_DIM))
            a = float(self.policy.sample(cont[None], cats[None], noise).action[0, 0])
        return a, float(nn.scale_action(a, h_max))

    def all_params(self) -> list[np.ndarray]:
        out = list(self.policy.params())
        for c, t in zip(self.critics, self.targets):
            out += c.params() + t.params()
        return out + [self.log_alpha]

    def to_json(self) -> dict:
        def opt(s: nn.AdamState) -> dict:
            return {"t": s.t, "lr": s.lr, "m": [nn.encode_array(a) for a in s.m], "v": [nn.encode_array(a) for a in s.v]}

        nets = {"policy": [nn.encode_array(p) for p in self.policy.params()]}
        for k, (c, t) in enumerate(zip(self.critics, self.targets)):
            nets[f"critic_{k}"] = [nn.encode_array(p) for p in c.params()]
            nets[f"target_{k}"] = [nn.encode_array(p) for p in t.params()]
        optim = {"policy": opt(self.policy_opt), "alpha": opt(self.alpha_opt)}
        for k, s in enumerate(self.critic_opts):
            optim[f"critic_{k}"] = opt(s)
        return {
            "K": self.K, "cardinalities": list(self.cardinalities), "hidden": list(self.cfg.hidden),
            "networks": nets, "optim": optim, "log_alpha": nn.encode_array(self.log_alpha),
        }

    def load_json(self, doc: dict) -> None:
        if doc["K"] != self.K:
            raise ValueError(f"checkpoint has K={doc['K']} critics but the config expects K={self.K}")
        if tuple(doc["cardinalities"]) != self.cardinalities:
            raise ValueError(
                f"checkpoint categorical cardinalities {tuple(doc['cardinalities'])} "
                f"do not match corridor {self.cardinalities}"
            )
        if tuple(doc["hidden"]) != tuple(self.cfg.hidden):
            raise ValueError(f"checkpoint hidden widths {doc['hidden']} do not match {list(self.cfg.hidden)}")
        nets = doc["networks"]
        nn.load_into(self.policy.params(), nets["policy"])
        for k in range(self.K):
            nn.load_into(self.critics[k].params(), nets[f"critic_{k}"])
            nn.load_into(self.targets[k].params(), nets[f"target_{k}"])

        def opt(s: nn.AdamState, d: dict) -> None:
            s.t = int(d["t"])
            s.lr = float(d["lr"])
            nn.load_into(s.m, d["m"])
            nn.load_into(s.v, d["v"])

        opt(self.policy_opt, doc["optim"]["policy"])
        opt(self.alpha_opt, doc["optim"]["alpha"])
        for k, s in enumerate(self.critic_opts):
            opt(s, doc["optim"][f"critic_{k}"])
        self.log_alpha[...] = nn.decode_array(doc["log_alpha"])


# --- update rules ---------------------------------------------------------------------------


def compute_gamma_epi(q_targets: np.ndarray) -> np.ndarray:
    """Unbiased variance across the K target heads (axis 0)."""
    q_targets = np.asarray(q_targets, dtype=np.float64)
    if q_targets.shape[0] < 2:
        raise ValueError("epistemic variance needs K >= 2 target critics")
    return np.var(q_targets, axis=0, ddof=1)


def ensemble_std(q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample std across heads and its derivative w.r.t. each head (zero where the std vanishes)."""
    K = q.shape[0]
    dev = q - q.mean(axis=0)
    sigma = np.sqrt(np.sum(dev**2, axis=0) / (K - 1))
    denom = (K - 1) * sigma
    grad = np.divide(dev, denom, out=np.zeros_like(dev), where=denom > 0)
    return sigma, grad


def _aggregate(q: np.ndarray, how: str) -> tuple[np.ndarray, np.ndarray]:
    """Aggregated value and d(value)/d(head) weights."""
    if how == "min":
        idx = np.argmin(q, axis=0)
        w = np.zeros_like(q)
        w[idx, np.arange(q.shape[1])] = 1.0
        return q[idx, np.arange(q.shape[1])], w
    return q.mean(axis=0), np.full_like(q, 1.0 / q.shape[0])


def _check_finite(name: str, value, batch: Batch | None = None) -> None:
    if not np.all(np.isfinite(value)):
        diag = {}
        if batch is not None:
            for k in ("cont", "action", "reward", "next_cont"):
                arr = getattr(batch, k)
                diag[k] = {"min": float(np.nanmin(arr)), "max": float(np.nanmax(arr)), "mean": float(np.nanmean(arr))}
        raise NumericalHalt(f"non-finite {name}", diag)


def compute_target_y(agent: Agent, batch: Batch, cfg: TrainerConfig, rng: np.random.Generator, kappa: float) -> tuple[np.ndarray, float]:
    """Bootstrapped targets and the batch-mean epistemic variance.

    ``kappa`` is the frozen L1 penalty ``lambda_ale * sum |W|``; with the bonus flag
    on, ``lambda_ale * kappa`` is added to the bootstrapped value.
    """
    noise = rng.standard_normal((len(batch), ACTION_DIM))
    nxt = agent.policy.sample(batch.next_cont, batch.next_cats, noise)
    q_next, _ = agent.heads(agent.targets, batch.next_cont, batch.next_cats, nxt.action)
    alpha = agent.alpha
    if cfg.mode == "sac":
        # twin-critic baseline: no penalties, min (or mean) over heads
        agg, _ = _aggregate(q_next, cfg.aggregation)
        boot = agg - alpha * nxt.log_prob
        gamma_epi = np.zeros(len(batch))
    else:
        gamma_epi = compute_gamma_epi(q_next)
        agg, _ = _aggregate(q_next, cfg.aggregation)
        boot = agg - cfg.lambda_epi * gamma_epi - alpha * nxt.log_prob
        if cfg.aleatoric_target_bonus:
            boot = boot + cfg.lambda_ale * kappa
    y = batch.reward + (1.0 - batch.done) * cfg.gamma * boot
    _check_finite("target", y, batch)
    return y, float(gamma_epi.mean())


def critic_update(agent: Agent, batch: Batch, y: np.ndarray, cfg: TrainerConfig) -> list[float]:
    """One Adam step per online critic on MSE + L1 + disagreement penalty."""
    B = len(batch)
    q, caches = agent.heads(agent.critics, batch.cont, batch.cats, batch.action)
    penal = cfg.mode != "sac"
    use_ood = penal and cfg.beta_ood != 0
    if use_ood:
        sigma, dsigma = ensemble_std(q)
        ood = float(sigma.mean())
    losses = []
    for k, (critic, cache) in enumerate(zip(agent.critics, caches)):
        err = q[k] - y
        loss = float(np.mean(err**2))
        g_q = 2.0 * err / B
        if use_ood:
            loss += cfg.beta_ood * ood
            g_q = g_q + cfg.beta_ood * dsigma[k] / B
        grads, _ = critic.backward(cache, g_q)
        if penal and cfg.lambda_ale != 0:
            l1, signs = nn.l1_norm_and_subgradient(critic.mlp)
            loss += cfg.lambda_ale * l1
            n_emb = len(critic.encoder.tables)
            for layer, s in enumerate(signs):
                grads[n_emb + 2 * layer] = grads[n_emb + 2 * layer] + cfg.lambda_ale * s
        _check_finite(f"critic {k} loss", loss, batch)
        grads = nn.clip_global_norm(grads, cfg.grad_clip)
        nn.adam_step(agent.critic_opts[k], critic.params(), grads)
        losses.append(loss)
    return losses


def actor_update(agent: Agent, batch: Batch, cfg: TrainerConfig, rng: np.random.Generator, kappa: float) -> tuple[float, np.ndarray]:
    """LCB policy step; critics provide action gradients but are not updated."""
    B = len(batch)
    noise = rng.standard_normal((B, ACTION_DIM))
    smp = agent.policy.sample(batch.cont, batch.cats, noise)
    q, caches = agent.heads(agent.critics, batch.cont, batch.cats, smp.action)
    alpha = agent.alpha
    agg, w = _aggregate(q, cfg.aggregation)
    objective = agg
    if cfg.mode != "sac":
        if cfg.beta_lcb != 0:
            sigma, dsigma = ensemble_std(q)
            objective = objective + cfg.beta_lcb * sigma
            w = w + cfg.beta_lcb * dsigma
        if cfg.aleatoric_target_bonus:
            objective = objective + cfg.lambda_ale * kappa  # constant in the action
    loss = float(np.mean(alpha * smp.log_prob - objective))
    _check_finite("actor loss", loss, batch)
    g_action = np.zeros_like(smp.action)
    for k, (critic, cache) in enumerate(zip(agent.critics, caches)):
        _, ga = critic.backward(cache, -w[k] / B)
        g_action += ga
    grads = agent.policy.backward(smp, g_action, np.full(B, alpha / B))
    grads = nn.clip_global_norm(grads, cfg.grad_clip)
    nn.adam_step(agent.policy_opt, agent.policy.params(), grads)
    return loss, smp.log_prob


def temperature_update(agent: Agent, log_probs: np.ndarray, cfg: TrainerConfig) -> float:
    grad = -float(np.mean(log_probs + cfg.target_entropy))
    nn.adam_step(agent.alpha_opt, [agent.log_alpha], [np.array([grad])])
    agent.log_alpha[0] = min(agent.log_alpha[0], math.log(cfg.alpha_max)) if cfg.alpha_max > 0 else agent.log_alpha[0]
    return agent.alpha


def soft_target_sync(agent: Agent, tau: float) -> None:
    for c, t in zip(agent.critics, agent.targets):
        nn.soft_update(t.params(), c.params(), tau)


@dataclass
class UpdateStats:
    triggers: int = 0
    skipped: int = 0
    critic_rounds: int = 0
    actor_rounds: int = 0
    gamma_epi_sum: float = 0.0
    kappa: float = 0.0


def update_trigger(agent: Agent, buffer: ReplayBuffer, cfg: TrainerConfig, rngs: dict, stats: UpdateStats) -> None:
    stats.triggers += 1
    if len(buffer) == 0 or len(buffer) < cfg.warmup_steps:
        stats.skipped += 1
        return
    for _ in range(cfg.critic_rounds):
        # the L1 bonus is frozen for the round
        kappa = cfg.lambda_ale * agent.l1_total() if cfg.mode != "sac" else 0.0
        batch = buffer.sample(rngs["sampler"], cfg.batch_size)
        y, g_epi = compute_target_y(agent, batch, cfg, rngs["policy"], kappa)
        critic_update(agent, batch, y, cfg)
        stats.critic_rounds += 1
        stats.gamma_epi_sum += g_epi
        stats.kappa = kappa
    for _ in range(cfg.actor_rounds):
        kappa = cfg.lambda_ale * agent.l1_total() if cfg.mode != "sac" else 0.0
        batch = buffer.sample(rngs["sampler"], cfg.batch_size)
        _, log_probs = actor_update(agent, batch, cfg, rngs["policy"], kappa)
        temperature_update(agent, log_probs, cfg)
        stats.actor_rounds += 1
    soft_target_sync(agent, cfg.tau_sync)
    _check_finite("parameters", np.array([np.sum(p) for p in agent.all_params()]))


# --- probe and evaluation -------------------------------------------------------------------


def collect_probe(agent: Agent, corridor: CorridorConfig, seed: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """States from one rollout of the untrained stochastic policy, drawn once."""
    rng = substream(seed, "probe")
    sim = CorridorSim(corridor)
    req = sim.reset(episode_seed(seed, -1 & 0xFFFFFFFF))
    conts, cats = [], []
    while not req.episode_done:
        c, k = encode_observation(req.observation, corridor.tau)
        conts.append(c)
        cats.append(k)
        _, hold = agent.act(req.observation, corridor.tau, corridor.h_max, rng)
        req = sim.step(hold)
    idx = rng.choice(len(conts), size=size, replace=len(conts) < size)
    return np.array(conts)[idx], np.array(cats)[idx]


def probe_q_stats(agent: Agent, probe: tuple[np.ndarray, np.ndarray]) -> tuple[float, float]:
    cont, cats = probe
    a = agent.policy.deterministic(cont, cats)
    q, _ = agent.heads(agent.critics, cont, cats, a)
    m = q.mean(axis=0)
    return float(m.mean()), float(2.0 * m.std())


def rollout(agent: Agent, corridor: CorridorConfig, env_seed: int, rng: np.random.Generator | None = None) -> CorridorSim:
    """Run one episode (deterministic policy unless ``rng`` is given) and return the finished simulator."""
    sim = CorridorSim(corridor)
    req = sim.reset(env_seed)
    while not req.episode_done:
        _, hold = agent.act(req.observation, corridor.tau, corridor.h_max, rng)
        req = sim.step(hold)
    return sim


def evaluate_agent(agent: Agent, corridor: CorridorConfig, seed: int, rollouts: int) -> list[float]:
    return [rollout(agent, corridor, episode_seed(seed, 1_000_000 + i)).total_reward() for i in range(rollouts)]


# --- training loop --------------------------------------------------------------------------


@dataclass
class EpisodeMetrics:
    episode: int
    cum_reward: float
    q_mean: float
    q_2sigma: float
    kappa: float
    mean_gamma_epi: float
    alpha: float
    clamped_actions: int
    steps: int = 0
    triggers: int = 0
    critic_rounds: int = 0
    actor_rounds: int = 0

    def row(self) -> dict:
        return {c: getattr(self, c) for c in METRIC_COLUMNS}


@dataclass
class TrainResult:
    agent: Agent
    metrics: list[EpisodeMetrics]
    halted: bool = False
    halt_reason: str = ""
    checkpoints: list[str] = field(default_factory=list)
    seconds: float = 0.0


def _rng_state(rngs: dict) -> dict:
    return {k: r.bit_generator.state for k, r in rngs.items()}


def _set_rng_state(rngs: dict, states: dict) -> None:
    for k, r in rngs.items():
        r.bit_generator.state = states[k]


def content_hash(doc: dict) -> str:
    """Git-style blob hash of a canonical JSON rendering."""
    body = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


class Trainer:
    def __init__(self, cfg: TrainerConfig, corridor: CorridorConfig, seed: int):
        self.base_cfg = cfg
        self.cfg = cfg.resolved()
        self.corridor = corridor
        self.seed = int(seed)
        self.agent = Agent(self.cfg, corridor.cardinalities, self.seed)
        self.buffer = ReplayBuffer(self.cfg.buffer_capacity)
        self.rngs = {"policy": substream(self.seed, "policy"), "sampler": substream(self.seed, "sampler")}
        self.probe = collect_probe(self.agent, corridor, self.seed, self.cfg.probe_size)
        self.metrics: list[EpisodeMetrics] = []
        self.episode = 0  # episodes completed

    # -- checkpointing --

    def state_json(self, buffer_file: str | None) -> dict:
        return {
            "format": "resac-checkpoint",
            "version": 1,
            "episode": self.episode,
            "seed": self.seed,
            "trainer_config": self.base_cfg.to_json(),
            "corridor": self.corridor.to_json(),
            "agent": self.agent.to_json(),
            "rng": _rng_state(self.rngs),
            "probe": {"cont": nn.encode_array(self.probe[0]), "cats": self.probe[1].tolist()},
            "metrics": [asdict(m) for m in self.metrics],
            "buffer_file": buffer_file,
        }

    def save_checkpoint(self, path: str | Path) -> Path:
        path = Path(path)
        buf_name = path.with_suffix(".buffer.npz").name
        self.buffer.save(path.parent / buf_name)
        path.write_text(json.dumps(self.state_json(buf_name)))
        return path

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "Trainer":
        path = Path(path)
        doc = json.loads(path.read_text())
        if doc.get("format") != "resac-checkpoint":
            raise ValueError(f"{path} is not a training checkpoint")
        self = cls.__new__(cls)
        self.base_cfg = TrainerConfig.from_json(doc["trainer_config"])
        self.cfg = self.base_cfg.resolved()
        self.corridor = CorridorConfig.from_json(doc["corridor"])
        self.seed = int(doc["seed"])
        self.agent = Agent(self.cfg, self.corridor.cardinalities, self.seed)
        self.agent.load_json(doc["agent"])
        self.rngs = {"policy": substream(self.seed, "policy"), "sampler": substream(self.seed, "sampler")}
        _set_rng_state(self.rngs, doc["rng"])
        self.probe = (nn.decode_array(doc["probe"]["cont"]), np.array(doc["probe"]["cats"], dtype=np.int64))
        self.metrics = [EpisodeMetrics(**m) for m in doc["metrics"]]
        self.episode = int(doc["episode"])
        if doc.get("buffer_file"):
            self.buffer = ReplayBuffer.load(path.parent / doc["buffer_file"])
        else:
            self.buffer = ReplayBuffer(self.cfg.buffer_capacity)
        return self

    # -- episodes --

    def run_episode(self) -> EpisodeMetrics:
        cfg, corridor, agent = self.cfg, self.corridor, self.agent
        tau, h_max = corridor.tau, corridor.h_max
        sim = CorridorSim(corridor)
        req = sim.reset(episode_seed(self.seed, self.episode))
        pending: dict[int, tuple] = {}  # bus -> (cont, cats, action, hold)
        stats = UpdateStats()
        steps = 0
        while not req.episode_done:
            obs = req.observation
            cont, cats = encode_observation(obs, tau)
            prev = pending.pop(obs.bus_id, None)
            if prev is not None and req.reward_since_last is not None:
                self.buffer.add(*prev, req.reward_since_last, cont, cats, 0.0)
            a, hold = agent.act(obs, tau, h_max, self.rngs["policy"])
            pending[obs.bus_id] = (cont, cats, a, hold)
            req = sim.step(hold)
            steps += 1
            if steps % cfg.update_every == 0:
                update_trigger(agent, self.buffer, cfg, self.rngs, stats)
        for bus, r in sorted(req.final_rewards.items()):
            prev = pending.pop(bus, None)
            if prev is not None:
                self.buffer.add(*prev, r, prev[0], prev[1], 1.0)
        q_mean, q_2sigma = probe_q_stats(agent, self.probe)
        m = EpisodeMetrics(
            episode=self.episode, cum_reward=sim.total_reward(), q_mean=q_mean, q_2sigma=q_2sigma,
            kappa=stats.kappa, mean_gamma_epi=stats.gamma_epi_sum / max(stats.critic_rounds, 1),
            alpha=agent.alpha, clamped_actions=sim.clamped_actions, steps=steps, triggers=stats.triggers,
            critic_rounds=stats.critic_rounds, actor_rounds=stats.actor_rounds,
        )
        self.metrics.append(m)
        self.episode += 1
        return m

    def train(
        self,
        episodes: int | None = None,
        out_dir: str | Path | None = None,
        progress: Callable[[EpisodeMetrics], None] | None = None,
    ) -> TrainResult:
        total = self.cfg.episodes if episodes is None else episodes
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        result = TrainResult(self.agent, self.metrics)
        start = time.perf_counter()
        last_good = self.state_json(None)
        while self.episode < total:
            try:
                m = self.run_episode()
            except NumericalHalt as exc:
                result.halted = True
                result.halt_reason = f"{exc} {json.dumps(exc.diagnostics)}"
                if out is not None:
                    halt = out / "checkpoint_halt.json"
                    halt.write_text(json.dumps(last_good))
                    result.checkpoints.append(str(halt))
                break
            if progress is not None:
                progress(m)
            if out is not None:
                write_metrics_csv(out / "metrics.csv", self.metrics)
                if self.episode % self.cfg.checkpoint_every == 0 or self.episode == total:
                    ck = self.save_checkpoint(out / f"checkpoint_{self.episode:04d}.json")
                    result.checkpoints.append(str(ck))
            last_good = self.state_json(None)
        result.seconds = time.perf_counter() - start
        return result


def train(cfg: TrainerConfig, corridor: CorridorConfig, seed: int, out_dir=None, progress=None) -> TrainResult:
    return Trainer(cfg, corridor, seed).train(out_dir=out_dir, progress=progress)


def write_metrics_csv(path: str | Path, metrics: list[EpisodeMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for m in metrics:
            w.writerow([fmt(v) for v in m.row().values()])


def load_agent(path: str | Path, corridor: CorridorConfig | None = None) -> tuple[Agent, dict]:
    """Load the agent stored in a checkpoint. ``corridor`` (if given) must match its categorical layout."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "resac-checkpoint":
        raise ValueError(f"{path} is not a training checkpoint")
    cfg = TrainerConfig.from_json(doc["trainer_config"]).resolved()
    cards = tuple(doc["agent"]["cardinalities"])
    if corridor is not None and tuple(corridor.cardinalities) != cards:
        raise ValueError(
            f"checkpoint categorical cardinalities {cards} do not match corridor {tuple(corridor.cardinalities)}"
        )
    agent = Agent(cfg, cards, int(doc["seed"]))
    agent.load_json(doc["agent"])
    return agent, doc
