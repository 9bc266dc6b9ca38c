"""
Small dense networks with hand-written reverse-mode gradients.

Networks here are a few thousand parameters, so plain numpy matrix products with an
explicit backward pass are all the machinery needed.
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from chiller_horizon.core.errors import ConfigError, ContractError


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden_sizes: Tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if self.activation not in ("tanh", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if min((self.input_dim, self.output_dim) + tuple(self.hidden_sizes)) <= 0:
            raise ConfigError("layer sizes must be positive")

    @property
    def layer_sizes(self) -> List[int]:
        return [self.input_dim, *self.hidden_sizes, self.output_dim]

    def to_dict(self) -> Dict[str, object]:
        return {
            "input_dim": self.input_dim,
            "hidden_sizes": list(self.hidden_sizes),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "Architecture":
        return cls(
            int(data["input_dim"]), tuple(int(h) for h in data["hidden_sizes"]),
            int(data["output_dim"]), str(data["activation"]),
        )


class Mlp:
    """
    Fully connected network, ``activation`` between layers and a linear head.

    ``params`` alternates weight matrices ``(fan_in, fan_out)`` and bias vectors.
    """

    def __init__(self, arch: Architecture, rng: np.random.Generator, output_gain: float = 1.0):
        self.arch = arch
        self.params: List[np.ndarray] = []
        sizes = arch.layer_sizes
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            gain = output_gain if i == len(sizes) - 2 else 1.0
            self.params.append(rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def _act(self, z: np.ndarray) -> np.ndarray:
        return np.tanh(z) if self.arch.activation == "tanh" else np.maximum(z, 0.0)

    def _act_grad(self, z: np.ndarray, y: np.ndarray) -> np.ndarray:
        return 1.0 - y ** 2 if self.arch.activation == "tanh" else (z > 0).astype(float)

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, List[Tuple[np.ndarray, np.ndarray, np.ndarray]]]:
        """Output for a batch ``(n, input_dim)`` and the cache ``backward`` needs."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.arch.input_dim:
            raise ContractError(f"network expects {self.arch.input_dim} inputs, got {x.shape[1]}")
        cache = []
        h = x
        for layer in range(self.n_layers):
            w, b = self.params[2 * layer], self.params[2 * layer + 1]
            z = h @ w + b
            y = z if layer == self.n_layers - 1 else self._act(z)
            cache.append((h, z, y))
            h = y
        return h, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, grad_out: np.ndarray) -> List[np.ndarray]:
        grads: List[Optional[np.ndarray]] = [None] * len(self.params)
        g = np.asarray(grad_out, dtype=float)
        for layer in reversed(range(self.n_layers)):
            h, z, y = cache[layer]
            if layer != self.n_layers - 1:
                g = g * self._act_grad(z, y)
            grads[2 * layer] = h.T @ g
            grads[2 * layer + 1] = g.sum(axis=0)
            g = g @ self.params[2 * layer].T
        return grads  # type: ignore[return-value]

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params)

    def to_list(self) -> List[list]:
        return [p.tolist() for p in self.params]

    def load_list(self, values: Sequence[list]) -> None:
        if len(values) != len(self.params):
            raise ConfigError("parameter list does not match the architecture")
        loaded = [np.asarray(v, dtype=float) for v in values]
        for old, new in zip(self.params, loaded):
            if old.shape != new.shape:
                raise ConfigError(f"parameter shape {new.shape} does not match {old.shape}")
        self.params = loaded


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> Tuple[List[np.ndarray], float]:
    norm = global_norm(grads)
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        return [g * scale for g in grads], norm
    return list(grads), norm


class Adam:
    def __init__(self, shapes: Sequence[Tuple[int, ...]], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    def step(self, params: List[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def to_dict(self) -> Dict[str, object]:
        return {"t": self.t, "m": [x.tolist() for x in self.m], "v": [x.tolist() for x in self.v]}

    def load_dict(self, data: Dict[str, object]) -> None:
        self.t = int(data["t"])
        self.m = [np.asarray(x, dtype=float).reshape(old.shape) for x, old in zip(data["m"], self.m)]
        self.v = [np.asarray(x, dtype=float).reshape(old.shape) for x, old in zip(data["v"], self.v)]


class RunningMeanStd:
    """Streaming per-feature mean and variance; ``frozen`` stops updates at evaluation."""

    def __init__(self, dim: int, clip: float = 10.0):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 1e-4
        self.clip = clip
        self.frozen = False

    def update(self, batch: np.ndarray) -> None:
        if self.frozen:
            return
        batch = np.atleast_2d(np.asarray(batch, dtype=float))
        b_mean = batch.mean(axis=0)
        b_var = batch.var(axis=0)
        b_count = batch.shape[0]
        delta = b_mean - self.mean
        total = self.count + b_count
        self.mean = self.mean + delta * b_count / total
        m2 = self.var * self.count + b_var * b_count + delta ** 2 * self.count * b_count / total
        self.var = m2 / total
        self.count = total

    def normalize(self, x: np.ndarray) -> np.ndarray:
        z = (np.asarray(x, dtype=float) - self.mean) / np.sqrt(self.var + 1e-8)
        return np.clip(z, -self.clip, self.clip)

    def to_dict(self) -> Dict[str, object]:
        return {"mean": self.mean.tolist(), "var": self.var.tolist(), "count": self.count, "clip": self.clip}

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "RunningMeanStd":
        rms = cls(len(data["mean"]), float(data.get("clip", 10.0)))
        rms.mean = np.asarray(data["mean"], dtype=float)
        rms.var = np.asarray(data["var"], dtype=float)
        rms.count = float(data["count"])
        return rms
