"""
Clipped-surrogate PPO with a tanh-squashed diagonal Gaussian policy.

The actor and critic are separate MLPs from ``core.nn``; the log standard deviation
is a free vector. Stored actions keep the pre-squash Gaussian sample so the new/old
probability ratio is exact.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from chiller_horizon.core.checkpoint import load_checkpoint, save_checkpoint
from chiller_horizon.core.config import PpoConfig
from chiller_horizon.core.errors import ContractError, InputError, PpoNumericError, TrainingDivergedError
from chiller_horizon.core.nn import Adam, Architecture, Mlp, RunningMeanStd, clip_by_global_norm

logger = logging.getLogger(__name__)

POLICY_KIND = "ppo_policy"
_LOG_2PI = math.log(2 * math.pi)


def _squash_log_det(u: np.ndarray) -> np.ndarray:
    """``log(1 - tanh(u)^2)``, summed over the last axis, without cancellation."""
    return np.sum(2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u)), axis=-1)


def _gaussian_log_prob(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (u - mean) / np.exp(log_std)
    return np.sum(-0.5 * z ** 2 - log_std - 0.5 * _LOG_2PI, axis=-1)


def squashed_log_prob(mean: np.ndarray, log_std: np.ndarray, action: np.ndarray) -> np.ndarray:
    """Log density of a squashed action in (-1, 1)."""
    a = np.clip(np.asarray(action, dtype=float), -1 + 1e-12, 1 - 1e-12)
    u = np.arctanh(a)
    return _gaussian_log_prob(u, mean, log_std) - _squash_log_det(u)


def gaussian_entropy(log_std: np.ndarray) -> float:
    return float(np.sum(log_std + 0.5 * (_LOG_2PI + 1.0)))


class ActorCritic:
    def __init__(self, obs_dim: int, act_dim: int, cfg: PpoConfig, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.pi = Mlp(Architecture(obs_dim, cfg.hidden_sizes, act_dim, cfg.activation), rng, output_gain=0.01)
        self.vf = Mlp(Architecture(obs_dim, cfg.hidden_sizes, 1, cfg.activation), rng, output_gain=1.0)
        self.log_std = np.full(act_dim, float(cfg.init_log_std))
        self.obs_norm = RunningMeanStd(obs_dim)

    @property
    def obs_dim(self) -> int:
        return self.pi.arch.input_dim

    @property
    def act_dim(self) -> int:
        return self.pi.arch.output_dim

    def pi_params(self) -> List[np.ndarray]:
        return self.pi.params + [self.log_std]

    def vf_params(self) -> List[np.ndarray]:
        return self.vf.params

    def all_finite(self) -> bool:
        return self.pi.all_finite() and self.vf.all_finite() and bool(np.all(np.isfinite(self.log_std)))

    def value(self, obs: np.ndarray) -> np.ndarray:
        """Critic output for normalised observations."""
        return self.vf(obs)[:, 0]

    def state(self) -> Dict[str, Any]:
        return {
            "architecture": {"pi": self.pi.arch.to_dict(), "vf": self.vf.arch.to_dict()},
            "params": {"pi": self.pi.to_list(), "vf": self.vf.to_list(), "log_std": self.log_std.tolist()},
            "obs_norm": self.obs_norm.to_dict(),
        }

    def load_state(self, payload: Dict[str, Any]) -> None:
        arch = payload["architecture"]
        if Architecture.from_dict(arch["pi"]) != self.pi.arch or Architecture.from_dict(arch["vf"]) != self.vf.arch:
            raise ContractError("checkpoint architecture does not match this policy")
        self.pi.load_list(payload["params"]["pi"])
        self.vf.load_list(payload["params"]["vf"])
        self.log_std = np.asarray(payload["params"]["log_std"], dtype=float)
        self.obs_norm = RunningMeanStd.from_dict(payload["obs_norm"])

    @classmethod
    def from_checkpoint(cls, payload: Dict[str, Any]) -> "ActorCritic":
        cfg = PpoConfig.model_validate(payload["extra"]["ppo"])
        pi_arch = Architecture.from_dict(payload["architecture"]["pi"])
        policy = cls(pi_arch.input_dim, pi_arch.output_dim, cfg)
        policy.load_state(payload)
        policy.obs_norm.frozen = True
        return policy


@dataclass(frozen=True)
class PolicyOutput:
    mean: np.ndarray
    log_std: np.ndarray
    action: np.ndarray
    pre_squash: np.ndarray
    log_prob: float


def _obs_vector(obs: Any) -> np.ndarray:
    return np.asarray(getattr(obs, "vector", obs), dtype=float).reshape(-1)


def policy_forward(
    policy: ActorCritic,
    obs: Any,
    rng: Optional[np.random.Generator] = None,
    deterministic: bool = False,
    normalized: bool = False,
) -> PolicyOutput:
    """
    Mean, log-std, squashed action and its log-probability for one observation.

    ``deterministic`` returns ``tanh(mean)``, the zero-variance limit, and is what
    controllers use at evaluation.
    """
    if not policy.all_finite():
        raise PpoNumericError("policy parameters are not finite")
    x = _obs_vector(obs)
    if x.size != policy.obs_dim:
        raise ContractError(f"observation has {x.size} entries, policy expects {policy.obs_dim}")
    if not normalized:
        x = policy.obs_norm.normalize(x)
    mean = policy.pi(x[None, :])[0]
    log_std = policy.log_std.copy()
    if deterministic:
        u = mean.copy()
    else:
        rng = rng if rng is not None else np.random.default_rng()
        u = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    log_prob = float(_gaussian_log_prob(u, mean, log_std) - _squash_log_det(u))
    return PolicyOutput(mean=mean, log_std=log_std, action=np.tanh(u), pre_squash=u, log_prob=log_prob)


def gae_advantages(
    rewards: Sequence[float],
    values: Sequence[float],
    dones: Sequence[bool],
    gamma: float,
    lam: float,
    last_value: float = 0.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Generalized advantage estimates and returns-to-go.

    ``dones[t]`` ends an episode after step ``t``; nothing is bootstrapped across it.
    ``last_value`` bootstraps the step after the final one when it is not done.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    d = np.asarray(dones, dtype=bool)
    if not (r.shape == v.shape == d.shape) or r.ndim != 1:
        raise ContractError("rewards, values and dones must be equal-length 1-D sequences")
    n = r.size
    adv = np.zeros(n)
    gae = 0.0
    for t in reversed(range(n)):
        next_value = v[t + 1] if t + 1 < n else last_value
        not_done = 0.0 if d[t] else 1.0
        delta = r[t] + gamma * next_value * not_done - v[t]
        gae = delta + gamma * lam * not_done * gae
        adv[t] = gae
    return adv, adv + v


@dataclass(frozen=True)
class MiniBatch:
    obs: np.ndarray
    pre_squash: np.ndarray
    log_prob: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return int(self.obs.shape[0])


class RolloutBuffer:
    """Per-step rollout storage; ``finish`` computes normalised advantages and returns."""

    def __init__(self) -> None:
        self.obs: List[np.ndarray] = []
        self.pre_squash: List[np.ndarray] = []
        self.log_probs: List[float] = []
        self.rewards: List[float] = []
        self.values: List[float] = []
        self.dones: List[bool] = []
        self.advantages: Optional[np.ndarray] = None
        self.returns: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.rewards)

    def add(self, obs: np.ndarray, pre_squash: np.ndarray, log_prob: float, reward: float,
            value: float, done: bool) -> None:
        self.obs.append(np.asarray(obs, dtype=float))
        self.pre_squash.append(np.asarray(pre_squash, dtype=float))
        self.log_probs.append(float(log_prob))
        self.rewards.append(float(reward))
        self.values.append(float(value))
        self.dones.append(bool(done))
        self.advantages = self.returns = None

    def finish(self, gamma: float, lam: float, last_value: float = 0.0) -> None:
        adv, ret = gae_advantages(self.rewards, self.values, self.dones, gamma, lam, last_value)
        std = adv.std()
        self.advantages = (adv - adv.mean()) / std if std > 1e-8 else adv - adv.mean()
        self.returns = ret

    def batch(self, index: Optional[np.ndarray] = None) -> MiniBatch:
        if self.advantages is None or self.returns is None:
            raise ContractError("advantages must be computed before any update")
        idx = np.arange(len(self)) if index is None else index
        return MiniBatch(
            obs=np.asarray(self.obs)[idx],
            pre_squash=np.asarray(self.pre_squash)[idx],
            log_prob=np.asarray(self.log_probs)[idx],
            advantages=self.advantages[idx],
            returns=self.returns[idx],
        )

    def minibatches(self, rng: np.random.Generator, size: int) -> Iterator[MiniBatch]:
        order = rng.permutation(len(self))
        for start in range(0, len(order), size):
            yield self.batch(order[start:start + size])


def clipped_surrogate(ratio: np.ndarray, advantages: np.ndarray, clip_ratio: float) -> np.ndarray:
    """Per-sample ``min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)``."""
    ratio = np.asarray(ratio, dtype=float)
    advantages = np.asarray(advantages, dtype=float)
    clipped = np.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio)
    return np.minimum(ratio * advantages, clipped * advantages)


@dataclass(frozen=True)
class LossResult:
    loss: float
    pi_loss: float
    vf_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float
    pi_grads: List[np.ndarray] = field(repr=False)
    vf_grads: List[np.ndarray] = field(repr=False)


def ppo_loss(policy: ActorCritic, batch: MiniBatch, cfg: PpoConfig, clip_ratio: Optional[float] = None) -> LossResult:
    """
    Total PPO loss on a minibatch and its gradients.

    loss = -mean(clipped surrogate) + vf_coef * mean((V - R)^2) - entropy_coef * H,
    where H is the entropy of the pre-squash Gaussian.
    """
    eps = cfg.clip_ratio if clip_ratio is None else clip_ratio
    n = len(batch)
    mean, pi_cache = policy.pi.forward(batch.obs)
    values, vf_cache = policy.vf.forward(batch.obs)
    values = values[:, 0]
    log_std = policy.log_std
    sigma = np.exp(log_std)
    z = (batch.pre_squash - mean) / sigma
    log_prob = np.sum(-0.5 * z ** 2 - log_std - 0.5 * _LOG_2PI, axis=1) - _squash_log_det(batch.pre_squash)
    ratio = np.exp(log_prob - batch.log_prob)
    adv = batch.advantages

    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    pi_loss = -float(np.mean(np.minimum(unclipped, clipped)))
    vf_loss = float(np.mean((values - batch.returns) ** 2))
    entropy = gaussian_entropy(log_std)
    loss = pi_loss + cfg.vf_coef * vf_loss - cfg.entropy_coef * entropy
    approx_kl = float(np.mean(batch.log_prob - log_prob))
    clip_fraction = float(np.mean(np.abs(ratio - 1.0) > eps))

    if not (math.isfinite(loss) and np.all(np.isfinite(ratio))):
        raise PpoNumericError(
            "non-finite PPO loss",
            diagnostics={
                "loss": loss, "pi_loss": pi_loss, "vf_loss": vf_loss,
                "max_ratio": float(np.nanmax(ratio)) if ratio.size else None,
                "max_abs_adv": float(np.max(np.abs(adv))) if adv.size else None,
                "log_std": log_std.tolist(), "batch_size": n,
            },
        )

    # The clipped branch carries no gradient.
    d_logp = np.where(unclipped <= clipped, -unclipped, 0.0) / n
    d_mean = d_logp[:, None] * z / sigma
    d_log_std = np.sum(d_logp[:, None] * (z ** 2 - 1.0), axis=0) - cfg.entropy_coef
    pi_grads = policy.pi.backward(pi_cache, d_mean) + [d_log_std]
    d_values = cfg.vf_coef * 2.0 * (values - batch.returns) / n
    vf_grads = policy.vf.backward(vf_cache, d_values[:, None])
    return LossResult(loss, pi_loss, vf_loss, entropy, clip_fraction, approx_kl, pi_grads, vf_grads)


def grad_check(
    params: List[np.ndarray],
    loss_and_grad: Callable[[], Tuple[float, Sequence[np.ndarray]]],
    h: float = 1e-5,
    n_checks: int = 64,
    seed: int = 0,
) -> float:
    """
    Largest relative error between reverse-mode and central-difference gradients.

    ``params`` are perturbed in place and restored; ``loss_and_grad`` evaluates the
    loss at their current values. Relative error is ``|a - n| / max(|a|, |n|, 1e-5)``.
    """
    if not h > 0:
        raise InputError(f"finite-difference step must be positive, got {h}")
    _, grads = loss_and_grad()
    grads = [np.array(g, dtype=float) for g in grads]
    rng = np.random.default_rng(seed)
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_checks, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(int(flat - offsets[k]), params[k].shape)
        original = params[k][idx]
        params[k][idx] = original + h
        plus, _ = loss_and_grad()
        params[k][idx] = original - h
        minus, _ = loss_and_grad()
        params[k][idx] = original
        numeric = (plus - minus) / (2 * h)
        analytic = grads[k][idx]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-5)
        worst = max(worst, float(rel))
    return worst


@dataclass(frozen=True)
class BatchStats:
    batch: int
    steps: int
    episodes: int
    mean_return: float
    mean_reward: float
    hard_violation_fraction: float
    pi_loss: float
    vf_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float
    epochs: int


@dataclass
class TrainResult:
    policy: ActorCritic
    curve: List[BatchStats]
    steps: int
    checkpoint_path: Optional[str] = None


def _checkpoint_payload(
    policy: ActorCritic,
    pi_opt: Adam,
    vf_opt: Adam,
    rng: np.random.Generator,
    batch_index: int,
    steps: int,
    curve: List[BatchStats],
    config_hash: str,
    extra: Dict[str, Any],
) -> Dict[str, Any]:
    payload = policy.state()
    payload.update({
        "kind": POLICY_KIND,
        "config_hash": config_hash,
        "optimizer": {"pi": pi_opt.to_dict(), "vf": vf_opt.to_dict()},
        "rng_state": rng.bit_generator.state,
        "batch_index": batch_index,
        "extra": {
            **extra,
            "ppo": policy.cfg.model_dump(mode="json"),
            "steps": steps,
            "curve": [asdict(s) for s in curve],
        },
    })
    return payload


def load_policy(path: Union[str, Path]) -> Tuple[ActorCritic, Dict[str, Any]]:
    payload = load_checkpoint(path, kind=POLICY_KIND)
    return ActorCritic.from_checkpoint(payload), payload


def _collect(env: Any, policy: ActorCritic, rng: np.random.Generator, n_steps: int):
    """Roll out whole episodes until at least ``n_steps`` steps are stored."""
    buffer = RolloutBuffer()
    raw_obs: List[np.ndarray] = []
    returns: List[float] = []
    hard = 0
    while len(buffer) < n_steps:
        obs = env.reset(seed=int(rng.integers(2 ** 31 - 1)))
        ep_return = 0.0
        done = False
        while not done:
            vec = _obs_vector(obs)
            raw_obs.append(vec)
            x = policy.obs_norm.normalize(vec)
            out = policy_forward(policy, x, rng, normalized=True)
            value = float(policy.value(x[None, :])[0])
            result = env.step(out.action)
            done = bool(result.done)
            buffer.add(x, out.pre_squash, out.log_prob, result.reward, value, done)
            ep_return += result.reward
            if result.info.get("active_component", "power") != "power":
                hard += 1
            obs = result.observation
        returns.append(ep_return)
    return buffer, np.asarray(raw_obs), returns, hard


def train(
    env_factory: Callable[[], Any],
    cfg: PpoConfig,
    total_steps: int,
    checkpoint_path: Optional[Union[str, Path]] = None,
    resume_from: Optional[Union[str, Path]] = None,
    config_hash: str = "",
    extra: Optional[Dict[str, Any]] = None,
    on_batch: Optional[Callable[[BatchStats], None]] = None,
) -> TrainResult:
    """
    Alternate whole-episode rollouts and minibatch updates until ``total_steps``
    environment steps have been collected.

    Episode seeds, minibatch order and action noise all come from one generator
    seeded by ``cfg.seed``; a checkpoint stores its state so resuming reproduces the
    next batch exactly.
    """
    rng = np.random.default_rng(cfg.seed)
    env = env_factory()
    policy = ActorCritic(env.obs_dim, env.act_dim, cfg, rng)
    pi_opt = Adam([p.shape for p in policy.pi_params()], cfg.pi_lr)
    vf_opt = Adam([p.shape for p in policy.vf_params()], cfg.vf_lr)
    extra = dict(extra or {})
    batch_index = 0
    steps = 0
    curve: List[BatchStats] = []
    last_good: Optional[str] = None

    if resume_from is not None:
        state = load_checkpoint(resume_from, kind=POLICY_KIND)
        policy.load_state(state)
        pi_opt.load_dict(state["optimizer"]["pi"])
        vf_opt.load_dict(state["optimizer"]["vf"])
        rng.bit_generator.state = state["rng_state"]
        batch_index = int(state["batch_index"])
        steps = int(state["extra"].get("steps", 0))
        curve = [BatchStats(**s) for s in state["extra"].get("curve", [])]
        last_good = str(resume_from)
        logger.info("resumed from %s at batch %d (%d steps)", resume_from, batch_index, steps)

    while steps < total_steps:
        buffer, raw_obs, returns, hard = _collect(env, policy, rng, cfg.steps_per_batch)
        buffer.finish(cfg.gamma, cfg.gae_lambda)
        n = len(buffer)

        epochs = 0
        last: Optional[LossResult] = None
        try:
            for epoch in range(cfg.update_epochs):
                stop = False
                for mb in buffer.minibatches(rng, cfg.minibatch_size):
                    res = ppo_loss(policy, mb, cfg)
                    last = res
                    if res.approx_kl > 1.5 * cfg.target_kl:
                        stop = True
                        break
                    pi_grads, _ = clip_by_global_norm(res.pi_grads, cfg.max_grad_norm)
                    vf_grads, _ = clip_by_global_norm(res.vf_grads, cfg.max_grad_norm)
                    pi_opt.step(policy.pi_params(), pi_grads)
                    vf_opt.step(policy.vf_params(), vf_grads)
                    if not policy.all_finite():
                        raise PpoNumericError("parameters became non-finite", {"batch": batch_index, "epoch": epoch})
                epochs = epoch + 1
                if stop:
                    logger.warning("batch %d: approx KL above 1.5x target, stopping at epoch %d", batch_index, epoch + 1)
                    break
        except PpoNumericError as exc:
            logger.error("training diverged at batch %d: %s %s", batch_index, exc, exc.diagnostics)
            raise TrainingDivergedError(f"training diverged at batch {batch_index}: {exc}", last_good) from exc

        policy.obs_norm.update(raw_obs)
        steps += n
        stats = BatchStats(
            batch=batch_index,
            steps=n,
            episodes=len(returns),
            mean_return=float(np.mean(returns)),
            mean_reward=float(np.mean(buffer.rewards)),
            hard_violation_fraction=hard / n,
            pi_loss=last.pi_loss if last else 0.0,
            vf_loss=last.vf_loss if last else 0.0,
            entropy=last.entropy if last else 0.0,
            approx_kl=last.approx_kl if last else 0.0,
            clip_fraction=last.clip_fraction if last else 0.0,
            epochs=epochs,
        )
        curve.append(stats)
        batch_index += 1
        logger.info(
            "batch %d: return %.3f kl %.4f clip %.3f hard %.3f",
            stats.batch, stats.mean_return, stats.approx_kl, stats.clip_fraction, stats.hard_violation_fraction,
        )
        if on_batch is not None:
            on_batch(stats)
        if checkpoint_path is not None and (batch_index % cfg.checkpoint_every == 0 or steps >= total_steps):
            payload = _checkpoint_payload(policy, pi_opt, vf_opt, rng, batch_index, steps, curve, config_hash, extra)
            last_good = str(save_checkpoint(checkpoint_path, payload))
            logger.info("checkpoint written to %s", last_good)

    if checkpoint_path is not None and last_good is None:
        payload = _checkpoint_payload(policy, pi_opt, vf_opt, rng, batch_index, steps, curve, config_hash, extra)
        last_good = str(save_checkpoint(checkpoint_path, payload))
    return TrainResult(policy=policy, curve=curve, steps=steps, checkpoint_path=last_good)
