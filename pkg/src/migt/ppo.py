"""Clipped-surrogate PPO over the portfolio environment.

Actions are allocations on the (n+1)-simplex drawn from a Dirichlet with concentration
``softplus(logits) * kappa + 1``; greedy evaluation uses ``softmax(logits)``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .env import PortfolioEnv
from .policy import MIGTPolicy, MemoryTensor, pad_memories

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("update", "steps", "mean_reward", "loss", "clip_fraction", "approx_kl")
ADV_STD_GUARD = 1e-8


class TrainingDiverged(RuntimeError):
    """Parameters went non-finite. ``policy`` holds the last finite parameters."""

    def __init__(self, message: str, policy: MIGTPolicy, log: TrainingLog):
        super().__init__(message)
        self.policy = policy
        self.log = log


@dataclass(frozen=True)
class PPOConfig:
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    epochs: int = 4
    minibatch: int = 64
    rollout: int = 256
    lr: float = 3e-4
    total_steps: int = 10_000
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    concentration: float = 10.0
    max_grad_norm: float = 0.5
    normalize_rewards: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ValueError(f"clip must lie in (0, 1), got {self.clip}")
        for name in ("gamma", "lam"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        for name in ("epochs", "minibatch", "rollout"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if not self.lr > 0 or not self.concentration > 0 or not self.max_grad_norm > 0:
            raise ValueError("lr, concentration and max_grad_norm must be positive")
        if self.value_coef < 0 or self.entropy_coef < 0:
            raise ValueError("loss coefficients must be non-negative")


# ---------------------------------------------------------------------------
# action distribution
# ---------------------------------------------------------------------------


def concentration(logits, kappa: float) -> Tensor:
    return ad.softplus(logits) * kappa + 1.0


def dirichlet_log_prob(alpha, action) -> Tensor:
    """log Dir(action | alpha), batched over leading axis."""
    alpha = ad.as_tensor(alpha)
    log_a = np.log(np.asarray(action.data if isinstance(action, Tensor) else action))
    return (ad.lgamma(alpha.sum(axis=-1)) - ad.lgamma(alpha).sum(axis=-1)
            + ((alpha - 1.0) * log_a).sum(axis=-1))


def dirichlet_entropy(alpha) -> Tensor:
    alpha = ad.as_tensor(alpha)
    k = alpha.shape[-1]
    a0 = alpha.sum(axis=-1)
    log_beta = ad.lgamma(alpha).sum(axis=-1) - ad.lgamma(a0)
    return (log_beta + (a0 - k) * ad.digamma(a0)
            - ((alpha - 1.0) * ad.digamma(alpha)).sum(axis=-1))


def greedy_action(logits: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return ad.softmax(Tensor(logits), axis=-1).data


def sample_action(logits: np.ndarray, kappa: float, rng: np.random.Generator) -> np.ndarray:
    with ad.no_grad():
        alpha = concentration(Tensor(logits), kappa).data
    a = rng.dirichlet(alpha)
    if np.any(a <= 0):
        a = np.maximum(a, 1e-300)
    return a / a.sum()


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------


@dataclass
class RolloutBatch:
    states: np.ndarray  # (N, T, n, F)
    memories: np.ndarray  # (N, L, d) left-padded
    memory_masks: np.ndarray  # (N, L)
    actions: np.ndarray  # (N, n+1)
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    last_value: float = 0.0
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    norm_advantages: np.ndarray | None = None
    episode_returns: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rewards)


class RolloutCollector:
    """Steps one environment with the current policy, carrying memory across calls."""

    def __init__(self, env: PortfolioEnv, policy: MIGTPolicy, kappa: float, rng: np.random.Generator):
        self.env = env
        self.policy = policy
        self.kappa = kappa
        self.rng = rng
        self.obs = env.reset()
        self.memory = policy.new_memory()
        self._episode_return = 0.0

    def collect(self, steps: int) -> RolloutBatch:
        if steps < 1:
            raise ValueError("steps must be >= 1")
        cap, d = self.policy.memory_capacity, self.policy.d_model
        states, mems, actions, logps, rewards, values, dones = [], [], [], [], [], [], []
        finished = []
        for _ in range(steps):
            mem_arr, mem_mask = pad_memories([self.memory], d, cap)
            logits, value, next_memory = self.policy.step(self.obs, self.memory, advance=1)
            action = sample_action(logits, self.kappa, self.rng)
            with ad.no_grad():
                logp = dirichlet_log_prob(concentration(Tensor(logits[None]), self.kappa), action[None]).data[0]
            next_obs, reward, done, _ = self.env.step(action)
            states.append(self.obs)
            mems.append((mem_arr[0], mem_mask[0]))
            actions.append(action)
            logps.append(logp)
            rewards.append(reward)
            values.append(value)
            dones.append(done)
            self._episode_return += reward
            if done:
                finished.append(self._episode_return)
                self._episode_return = 0.0
                self.obs = self.env.reset()
                self.memory = self.policy.new_memory()
            else:
                self.obs = next_obs
                self.memory = next_memory
        _, last_value, _ = self.policy.step(self.obs, self.memory, advance=1)
        return RolloutBatch(
            states=np.stack(states), memories=np.stack([m for m, _ in mems]),
            memory_masks=np.stack([k for _, k in mems]), actions=np.stack(actions),
            log_probs=np.asarray(logps), rewards=np.asarray(rewards), values=np.asarray(values),
            dones=np.asarray(dones, dtype=bool), last_value=float(last_value), episode_returns=finished)


def collect_rollout(env: PortfolioEnv, policy: MIGTPolicy, steps: int, rng: np.random.Generator,
                    kappa: float = 10.0) -> RolloutBatch:
    """Fresh rollout from ``env.reset()``."""
    return RolloutCollector(env, policy, kappa, rng).collect(steps)


def compute_advantages(batch: RolloutBatch, gamma: float, lam: float) -> RolloutBatch:
    """GAE: A_t = sum_k (gamma*lam)^k delta_{t+k}, cut at episode ends."""
    n = len(batch)
    adv = np.zeros(n)
    running = 0.0
    for t in reversed(range(n)):
        nonterminal = 0.0 if batch.dones[t] else 1.0
        next_value = batch.last_value if t == n - 1 else batch.values[t + 1]
        delta = batch.rewards[t] + gamma * next_value * nonterminal - batch.values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
    batch.advantages = adv
    batch.returns = adv + batch.values
    std = adv.std()
    # degenerate batches are centred but not rescaled, so constant advantages carry no gradient
    batch.norm_advantages = (adv - adv.mean()) / (std if std >= ADV_STD_GUARD else 1.0)
    return batch


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


class RewardScaler:
    """Running standard deviation of rewards (Welford); rewards are divided by it, never shifted.

    Rewards measured as a fraction of starting wealth are ~1e-4 per day, far below the scale of
    value-head errors, so unscaled TD residuals are dominated by value noise.
    """

    def __init__(self, eps: float = 1e-12):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0
        self.eps = eps

    def update(self, x: np.ndarray) -> None:
        for v in np.asarray(x, dtype=np.float64).reshape(-1):
            self.count += 1
            d = v - self.mean
            self.mean += d / self.count
            self.m2 += d * (v - self.mean)

    @property
    def std(self) -> float:
        return float(np.sqrt(self.m2 / self.count)) if self.count > 1 else 1.0

    def scale(self, x: np.ndarray) -> np.ndarray:
        sd = self.std
        return np.asarray(x) / sd if sd > self.eps else np.asarray(x)


@dataclass
class LossStats:
    loss: float
    policy_objective: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float


def clipped_surrogate(ratio, advantages, eps: float) -> Tensor:
    """Per-sample min(r A, clip(r, 1-eps, 1+eps) A)."""
    ratio = ad.as_tensor(ratio)
    adv = ad.as_tensor(advantages)
    return ad.minimum(ratio * adv, ad.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def ppo_loss(batch: RolloutBatch, policy: MIGTPolicy, eps: float, value_coef: float = 0.5,
             entropy_coef: float = 0.0, kappa: float = 10.0, idx: np.ndarray | None = None,
             advantages: np.ndarray | None = None) -> tuple[Tensor, LossStats]:
    """-L_clip + value_coef * MSE(value, return) - entropy_coef * entropy over ``idx``."""
    idx = np.arange(len(batch)) if idx is None else idx
    adv = batch.norm_advantages[idx] if advantages is None else advantages
    out = policy.forward(batch.states[idx], batch.memories[idx], batch.memory_masks[idx])
    alpha = concentration(out.logits, kappa)
    logp = dirichlet_log_prob(alpha, batch.actions[idx])
    log_ratio = logp - batch.log_probs[idx]
    if not np.all(np.isfinite(log_ratio.data)) or np.any(log_ratio.data > ad.EXP_CLAMP):
        bad = int(np.flatnonzero(~np.isfinite(log_ratio.data) | (log_ratio.data > ad.EXP_CLAMP))[0])
        raise FloatingPointError(f"non-finite probability ratio at sample {int(idx[bad])}")
    ratio = ad.exp(log_ratio)
    surrogate = clipped_surrogate(ratio, adv, eps).mean()
    value_loss = ad.square(out.value - batch.returns[idx]).mean()
    entropy = dirichlet_entropy(alpha).mean()
    loss = -surrogate + value_coef * value_loss - entropy_coef * entropy
    r = ratio.data
    stats = LossStats(
        loss=loss.item(), policy_objective=surrogate.item(), value_loss=value_loss.item(),
        entropy=entropy.item(), clip_fraction=float(np.mean(np.abs(r - 1.0) > eps)),
        approx_kl=float(np.mean((r - 1.0) - log_ratio.data)))
    return loss, stats


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad**2
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(p.grad**2)) for p in params if p.grad is not None)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append(row)

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for row in self.rows:
                w.writerow([row["update"], row["steps"]] + [repr(float(row[c])) for c in LOG_COLUMNS[2:]])


def ppo_update(batch: RolloutBatch, policy: MIGTPolicy, optimizer: Adam, cfg: PPOConfig,
               rng: np.random.Generator) -> LossStats:
    params = policy.parameters()
    n = len(batch)
    stats = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = order[start:start + cfg.minibatch]
            ad.zero_grad(params)
            loss, s = ppo_loss(batch, policy, cfg.clip, cfg.value_coef, cfg.entropy_coef,
                               cfg.concentration, idx)
            ad.backward(loss)
            clip_grad_norm(params, cfg.max_grad_norm)
            optimizer.step()
            stats.append(s)
    mean = {k: float(np.mean([getattr(s, k) for s in stats])) for k in asdict(stats[0])}
    return LossStats(**mean)


def _finite(policy: MIGTPolicy) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in policy.parameters())


def train(env: PortfolioEnv, policy: MIGTPolicy, cfg: PPOConfig,
          callback: Callable[[int, MIGTPolicy], None] | None = None,
          callback_every: int | None = None) -> tuple[MIGTPolicy, TrainingLog]:
    """Alternate rollouts, advantage estimation and clipped-surrogate epochs for ``cfg.total_steps``.

    ``callback(steps_done, policy)`` fires at step 0 and after every update crossing a multiple of
    ``callback_every``.
    """
    log = TrainingLog()
    rng = np.random.default_rng(cfg.seed)
    action_rng = np.random.default_rng(rng.integers(2**63))
    shuffle_rng = np.random.default_rng(rng.integers(2**63))
    optimizer = Adam(policy.parameters(), lr=cfg.lr)
    collector = RolloutCollector(env, policy, cfg.concentration, action_rng) if cfg.total_steps else None
    scaler = RewardScaler()
    if callback is not None:
        callback(0, policy)
    steps, update = 0, 0
    next_cb = callback_every or 0
    last_good = policy.state_dict()
    while steps < cfg.total_steps:
        n = min(cfg.rollout, cfg.total_steps - steps)
        batch = collector.collect(n)
        raw_rewards = batch.rewards
        if cfg.normalize_rewards:
            scaler.update(raw_rewards)
            batch.rewards = scaler.scale(raw_rewards)
        batch = compute_advantages(batch, cfg.gamma, cfg.lam)
        try:
            stats = ppo_update(batch, policy, optimizer, cfg, shuffle_rng)
        except FloatingPointError as exc:
            stats, bad = None, exc
        steps += n
        update += 1
        if stats is None or not _finite(policy) or not np.isfinite(stats.loss):
            policy.load_state_dict(last_good)
            raise TrainingDiverged(f"training diverged at update {update}"
                                   + (f": {bad}" if stats is None else ""), policy, log)
        last_good = policy.state_dict()
        log.append(update=update, steps=steps, mean_reward=float(raw_rewards.mean()), loss=stats.loss,
                   clip_fraction=stats.clip_fraction, approx_kl=stats.approx_kl)
        logger.debug("update %d steps %d loss %.6g", update, steps, stats.loss)
        if callback is not None and callback_every and (steps >= next_cb or steps >= cfg.total_steps):
            while next_cb <= steps:
                next_cb += callback_every
            callback(steps, policy)
    return policy, log
