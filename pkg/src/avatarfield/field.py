"""Canonical radiance field: hash-grid features decoded by a small ReLU MLP.

Density is ``softplus`` of the first output, colour the logistic of the other
three. There is no view-direction input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict

from .hashgrid import HashGridConfig, HashGridEncoding


class MlpConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    hidden: int = 64
    hidden_layers: int = 2


def softplus(x):
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


def sigmoid(x):
    # split keeps exp from overflowing for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class DecoderMlp:
    def __init__(self, n_in: int, config: MlpConfig = MlpConfig(), seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        widths = [n_in] + [config.hidden] * config.hidden_layers + [4]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = np.sqrt(6.0 / fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(self.dtype))
            self.biases.append(np.zeros(fan_out, dtype=self.dtype))
        self.weight_grads = [np.zeros_like(w) for w in self.weights]
        self.bias_grads = [np.zeros_like(b) for b in self.biases]

    def forward(self, feats: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        acts = [feats]
        h = feats
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts: list[np.ndarray], dout: np.ndarray) -> np.ndarray:
        g = dout
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (acts[i + 1] > 0)
            self.weight_grads[i] += acts[i].T @ g
            self.bias_grads[i] += g.sum(axis=0)
            g = g @ self.weights[i].T
        return g

    def zero_grad(self) -> None:
        for g in self.weight_grads + self.bias_grads:
            g[...] = 0.0


@dataclass
class FieldCache:
    points: np.ndarray
    acts: list[np.ndarray]
    logits: np.ndarray
    color: np.ndarray

    def take(self, idx) -> "FieldCache":
        return FieldCache(self.points[idx], [a[idx] for a in self.acts], self.logits[idx], self.color[idx])

    def __len__(self) -> int:
        return self.points.shape[0]


class CanonicalField:
    def __init__(
        self,
        grid_config: HashGridConfig = HashGridConfig(),
        mlp_config: MlpConfig = MlpConfig(),
        seed: int = 0,
        dtype=np.float32,
    ):
        self.dtype = np.dtype(dtype)
        self.grid = HashGridEncoding(grid_config, seed=seed, dtype=dtype)
        self.mlp = DecoderMlp(grid_config.n_features, mlp_config, seed=seed + 1, dtype=dtype)

    def contains(self, x):
        return self.grid.contains(x)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, FieldCache]:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        feats = self.grid.encode(x)
        logits, acts = self.mlp.forward(feats)
        sigma = softplus(logits[:, 0])
        color = sigmoid(logits[:, 1:4])
        return sigma, color, FieldCache(x, acts, logits, color)

    def query(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Density and colour at canonical points; raises DomainError outside the box."""
        sigma, color, _ = self.forward(x)
        if np.ndim(x) == 1:
            return sigma[0], color[0]
        return sigma, color

    def backward(self, cache: FieldCache, dsigma: np.ndarray, dcolor: np.ndarray) -> None:
        """Accumulate parameter gradients given upstream d/dsigma and d/dcolor."""
        if len(cache) == 0:
            return
        dlogits = np.empty_like(cache.logits)
        dlogits[:, 0] = np.asarray(dsigma, dtype=self.dtype).reshape(-1) * sigmoid(cache.logits[:, 0])
        c = cache.color
        dlogits[:, 1:4] = np.asarray(dcolor, dtype=self.dtype).reshape(-1, 3) * c * (1.0 - c)
        dfeats = self.mlp.backward(cache.acts, dlogits)
        self.grid.encode_backward(cache.points, dfeats)

    def query_backward(self, x: np.ndarray, dsigma, dcolor) -> None:
        _, _, cache = self.forward(x)
        self.backward(cache, dsigma, dcolor)

    def parameters(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        """(name, value, grad) triples; the order is the checkpoint order."""
        params = [("grid.tables", self.grid.tables, self.grid.grads)]
        for i, (w, g) in enumerate(zip(self.mlp.weights, self.mlp.weight_grads)):
            params.append((f"mlp.w{i}", w, g))
        for i, (b, g) in enumerate(zip(self.mlp.biases, self.mlp.bias_grads)):
            params.append((f"mlp.b{i}", b, g))
        return params

    def zero_grad(self) -> None:
        self.grid.zero_grad()
        self.mlp.zero_grad()
