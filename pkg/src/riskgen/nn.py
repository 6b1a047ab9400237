"""Small feed-forward networks with hand-written backprop, Adam, and checkpoint IO.

Networks compute in float64.  After training, parameters are rounded to
float32 so a checkpoint round-trip (float32 little-endian blocks) is exact.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


def silu(x):
    return x / (1.0 + np.exp(-x))


def silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


ACTIVATIONS = {
    "silu": (silu, silu_grad),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
}


class MLP:
    """Fully connected net ``sizes[0] -> ... -> sizes[-1]``; linear output layer."""

    def __init__(self, sizes, activation="silu", rng=None):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output size")
        rng = np.random.default_rng(0) if rng is None else rng
        self.sizes = [int(s) for s in sizes]
        self.activation = activation
        self.params: dict[str, np.ndarray] = {}
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            self.params[f"W{i}"] = rng.normal(0.0, np.sqrt(1.0 / n_in), size=(n_in, n_out))
            self.params[f"b{i}"] = np.zeros(n_out)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, x):
        act, _ = ACTIVATIONS[self.activation]
        pre = []
        inputs = []
        h = x
        for i in range(self.n_layers):
            inputs.append(h)
            a = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i < self.n_layers - 1:
                pre.append(a)
                h = act(a)
            else:
                h = a
        return h, (inputs, pre)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out, need_params=True):
        """Backprop ``grad_out``; returns ``(param_grads, grad_input)``."""
        _, dact = ACTIVATIONS[self.activation]
        inputs, pre = cache
        grads = {}
        g = grad_out
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                g = g * dact(pre[i])
            if need_params:
                grads[f"W{i}"] = inputs[i].T @ g
                grads[f"b{i}"] = g.sum(axis=0)
            g = g @ self.params[f"W{i}"].T
        return grads, g


class PrototypeTower:
    """Soft nearest-prototype features followed by a linear map.

    ``out = softmax(-|x - P_j|^2 / (2 rho^2))_j @ W + b``.  Far from the
    prototypes the softmax saturates, so the output stays bounded.
    """

    def __init__(self, dims, n_prototypes, out_dim, rng=None, init_points=None, rho=1.0):
        rng = np.random.default_rng(0) if rng is None else rng
        if init_points is not None:
            pick = rng.choice(len(init_points), size=n_prototypes, replace=len(init_points) < n_prototypes)
            P = np.array(init_points[pick], dtype=np.float64)
        else:
            P = rng.normal(size=(n_prototypes, dims))
        self.params = {
            "P": P,
            "log_rho": np.array([np.log(rho)]),
            "W": rng.normal(0.0, 1.0, size=(n_prototypes, out_dim)),
            "b": np.zeros(out_dim),
        }

    def forward(self, x):
        P = self.params["P"]
        rho2 = np.exp(2.0 * self.params["log_rho"][0])
        diff = x[:, None, :] - P[None]
        a = -0.5 * (diff ** 2).sum(-1) / rho2
        a = a - a.max(axis=1, keepdims=True)
        e = np.exp(a)
        phi = e / e.sum(axis=1, keepdims=True)
        return phi @ self.params["W"] + self.params["b"], (x, diff, phi, rho2)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out, need_params=True):
        x, diff, phi, rho2 = cache
        dphi = grad_out @ self.params["W"].T
        da = phi * (dphi - (phi * dphi).sum(1, keepdims=True))
        # a_j = -|x - P_j|^2 / (2 rho^2)
        gx = -np.einsum("nj,njd->nd", da, diff) / rho2
        grads = {}
        if need_params:
            grads["W"] = phi.T @ grad_out
            grads["b"] = grad_out.sum(0)
            grads["P"] = np.einsum("nj,njd->jd", da, diff) / rho2
            sq = (diff ** 2).sum(-1)
            grads["log_rho"] = np.array([(da * sq).sum() / rho2])
        return grads, gx


class Adam:
    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            if self.weight_decay and k.startswith("W"):
                g = g + self.weight_decay * self.params[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            # in-place so every holder of the dict sees the update
            self.params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def round_to_f32(params: dict) -> None:
    for k in params:
        params[k] = params[k].astype(np.float32).astype(np.float64)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def timestep_features(t, dim: int, max_period: float = 1000.0):
    """Sinusoidal features of integer steps ``t`` (scalar or array)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def minibatches(rng: np.random.Generator, n: int, batch_size: int):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# -- checkpoints --------------------------------------------------------------

def save_params(path, params: dict, arch: str, config: dict, seed: int, extra=None) -> Path:
    """Write ``params`` as ``<name>.bin`` float32 LE blocks plus ``manifest.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, arr in params.items():
        arr = np.asarray(arr)
        shapes[name] = list(arr.shape)
        arr.astype("<f4").tofile(path / f"{name}.bin")
    manifest = {
        "version": CHECKPOINT_VERSION,
        "arch": arch,
        "shapes": shapes,
        "config": config,
        "config_hash": config_hash(config),
        "seed": int(seed),
        "extra": extra or {},
    }
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, path / "manifest.json")
    return path


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(params, manifest)``."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    params = {}
    for name, shape in manifest["shapes"].items():
        raw = np.fromfile(path / f"{name}.bin", dtype="<f4")
        if raw.size != int(np.prod(shape)):
            raise ValueError(f"checkpoint block {name} is corrupt or truncated")
        params[name] = raw.reshape(shape).astype(np.float64)
    return params, manifest
