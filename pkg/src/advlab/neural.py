"""Dense tanh networks with exact reverse-mode gradients and Adam/SGD updates.

Weights are stored ``(fan_in, fan_out)`` so a batch ``x`` of shape ``(n, fan_in)``
maps to ``x @ W + b``. Everything is float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HIDDEN = (128, 128)


@dataclass
class MlpParams:
    weights: list
    biases: list

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0], *(w.shape[1] for w in self.weights))

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return type(self)([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self):
        return GradientBundle([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for a in self.arrays():
            a[...] = vec[pos:pos + a.size].reshape(a.shape)
            pos += a.size

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


class GradientBundle(MlpParams):
    """Per-parameter gradients, shape-identical to :class:`MlpParams`."""

    def scale(self, c: float) -> "GradientBundle":
        return GradientBundle([w * c for w in self.weights], [b * c for b in self.biases])

    def add(self, other: "GradientBundle") -> "GradientBundle":
        return GradientBundle([a + b for a, b in zip(self.weights, other.weights)],
                              [a + b for a, b in zip(self.biases, other.biases)])

    def norm(self) -> float:
        return float(np.sqrt(sum(float((a * a).sum()) for a in self.arrays())))


INIT_SCHEMES = ("uniform", "orthogonal")


def _orthogonal(rng, fi, fo, gain):
    a = rng.standard_normal((max(fi, fo), min(fi, fo)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    w = q if fi >= fo else q.T
    return gain * w[:fi, :fo]


def init_mlp(n_in: int, n_out: int, rng: np.random.Generator, hidden=HIDDEN,
             out_scale: float = 1.0, scheme: str = "uniform") -> MlpParams:
    """Seeded initialisation with zero biases.

    ``uniform`` draws from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) and multiplies the
    output layer by ``out_scale``; ``orthogonal`` uses gain sqrt(2) on hidden
    layers and ``out_scale`` as the output-layer gain.
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}")
    sizes = (n_in, *hidden, n_out)
    weights, biases = [], []
    for k, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = k == len(sizes) - 2
        if scheme == "orthogonal":
            w = _orthogonal(rng, fi, fo, out_scale if last else np.sqrt(2.0))
        else:
            bound = 1.0 / np.sqrt(fi)
            w = rng.uniform(-bound, bound, size=(fi, fo))
            if last:
                w *= out_scale
        weights.append(w)
        biases.append(np.zeros(fo))
    return MlpParams(weights, biases)


def forward(params: MlpParams, x):
    """Raw network output plus the activations needed by :func:`backward`."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != params.weights[0].shape[0]:
        raise ValueError(f"input width {h.shape[1]} != network input {params.weights[0].shape[0]}")
    acts = [h]
    n_layers = len(params.weights)
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        h = np.tanh(z) if k < n_layers - 1 else z
        acts.append(h)
    return h, (acts, single)


def backward(params: MlpParams, cache, upstream) -> GradientBundle:
    """Gradients of ``sum(upstream * output)`` with respect to every parameter."""
    acts, single = cache
    g = np.asarray(upstream, dtype=np.float64)
    if single and g.ndim == 1:
        g = g[None, :]
    n_layers = len(params.weights)
    gw, gb = [None] * n_layers, [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        gw[k] = acts[k].T @ g
        gb[k] = g.sum(axis=0)
        if k > 0:
            g = (g @ params.weights[k].T) * (1.0 - acts[k] ** 2)
    return GradientBundle(gw, gb)


def log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def forward_policy(params: MlpParams, obs) -> np.ndarray:
    logits, (_, single) = forward(params, obs)
    probs = softmax(logits)
    return probs[0] if single else probs


def forward_value(params: MlpParams, obs):
    out, (_, single) = forward(params, obs)
    out = out[:, 0]
    return float(out[0]) if single else out


def clip_grad_norm(grads: GradientBundle, max_norm: float | None) -> GradientBundle:
    if max_norm is None or max_norm <= 0:
        return grads
    norm = grads.norm()
    if norm > max_norm:
        return grads.scale(max_norm / (norm + 1e-6))
    return grads


class Sgd:
    def __init__(self, lr: float):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr

    def step(self, params: MlpParams, grads: GradientBundle) -> None:
        for p, g in zip(params.arrays(), grads.arrays()):
            p -= self.lr * g


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params: MlpParams, grads: GradientBundle) -> None:
        arrays = params.arrays()
        if self.m is None:
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(arrays, grads.arrays(), self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, lr: float):
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return Sgd(lr)
    raise ValueError(f"unknown optimizer {name!r}")


def sgd_step(params: MlpParams, grads: GradientBundle, lr: float) -> MlpParams:
    out = params.copy()
    Sgd(lr).step(out, grads)
    return out


def adam_step(params: MlpParams, grads: GradientBundle, lr: float, state: Adam | None = None):
    """Functional Adam update; returns the new parameters and the optimizer state."""
    state = state or Adam(lr)
    out = params.copy()
    state.step(out, grads)
    return out, state


# ---------------------------------------------------------------------------
# checkpoints: an .npz archive with arrays W0, b0, W1, b1, ... (each .npy member
# carries its own shape header) plus a ``sizes`` vector of layer widths.

def save_params(path, params: MlpParams) -> None:
    arrays = {"sizes": np.array(params.sizes, dtype=np.int64)}
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"W{k}"] = w
        arrays[f"b{k}"] = b
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path) -> MlpParams:
    with np.load(path) as data:
        n = len(data["sizes"]) - 1
        return MlpParams([data[f"W{k}"].copy() for k in range(n)], [data[f"b{k}"].copy() for k in range(n)])
