"""Small dense-network toolkit: MLPs, masked softmax, reverse-mode gradients, Adam.

Everything is float64 numpy.  ``forward`` accepts a single vector or a batch
(rows = samples); ``backward`` sums parameter gradients over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("tanh", "relu")


@dataclass
class MlpParams:
    weights: list  # each (out, in)
    biases: list  # each (out,)
    activation: str = "tanh"

    @property
    def sizes(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def copy(self):
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.activation)

    def arrays(self):
        return list(self.weights) + list(self.biases)

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def zeros_like(self):
        return MlpParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases], self.activation)


def init_mlp(sizes, seed, activation="tanh", out_scale=1.0) -> MlpParams:
    """Uniform fan-in init in +-sqrt(6/fan_in) (times ``out_scale`` on the last layer)."""
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ValueError("need at least two positive layer sizes")
    if activation not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {ACTIVATIONS}")
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / fan_in)
        if k == len(sizes) - 2:
            bound *= out_scale
        ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return MlpParams(ws, bs, activation)


def _act(z, kind):
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _act_grad(z, a, kind):
    return 1.0 - a * a if kind == "tanh" else (z > 0).astype(z.dtype)


def forward(p: MlpParams, x):
    """Return ``(y, cache)``; hidden layers use ``p.activation``, the output is linear."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.weights[0].shape[1]:
        raise ValueError(f"input width {x.shape[-1]} != {p.weights[0].shape[1]}")
    single = x.ndim == 1
    h = x[None, :] if single else x
    cache = {"single": single, "inputs": [], "pre": [], "post": []}
    last = len(p.weights) - 1
    for k, (w, b) in enumerate(zip(p.weights, p.biases)):
        cache["inputs"].append(h)
        z = h @ w.T + b
        cache["pre"].append(z)
        h = z if k == last else _act(z, p.activation)
        cache["post"].append(h)
    return (h[0] if single else h), cache


def backward(p: MlpParams, cache, dy):
    """Gradients (as an MlpParams) and dL/dx for upstream gradient ``dy``."""
    dy = np.asarray(dy, dtype=np.float64)
    g = dy[None, :] if cache["single"] else dy
    if g.shape != cache["post"][-1].shape:
        raise ValueError(f"dy shape {dy.shape} does not match network output")
    dws, dbs = [None] * len(p.weights), [None] * len(p.weights)
    last = len(p.weights) - 1
    for k in range(last, -1, -1):
        if k != last:
            g = g * _act_grad(cache["pre"][k], cache["post"][k], p.activation)
        dws[k] = g.T @ cache["inputs"][k]
        dbs[k] = g.sum(axis=0)
        g = g @ p.weights[k]
    dx = g[0] if cache["single"] else g
    return MlpParams(dws, dbs, p.activation), dx


def softmax(z, mask=None):
    """Masked, max-shifted softmax; masked entries get exactly 0."""
    z = np.asarray(z, dtype=np.float64)
    if mask is None:
        mask = np.ones(z.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("softmax over a fully masked vector")
    out = np.zeros_like(z)
    zz = z[mask]
    e = np.exp(zz - zz.max())
    out[mask] = e / e.sum()
    return out


@dataclass
class OptState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, p: MlpParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls([np.zeros_like(a) for a in p.arrays()],
                   [np.zeros_like(a) for a in p.arrays()], 0, lr, beta1, beta2, eps)

    def copy(self):
        return OptState([a.copy() for a in self.m], [a.copy() for a in self.v], self.step,
                        self.lr, self.beta1, self.beta2, self.eps)


class NonFiniteGradient(FloatingPointError):
    pass


def adam_step(p: MlpParams, grads: MlpParams, s: OptState):
    """Bias-corrected Adam update; returns new ``(params, state)``, inputs untouched."""
    ga = grads.arrays()
    if len(ga) != len(s.m) or any(g.shape != m.shape for g, m in zip(ga, s.m)):
        raise ValueError("gradient shapes do not match optimizer state")
    if not all(np.isfinite(g).all() for g in ga):
        raise NonFiniteGradient("non-finite gradient; step rejected")
    t = s.step + 1
    new_m = [s.beta1 * m + (1 - s.beta1) * g for m, g in zip(s.m, ga)]
    new_v = [s.beta2 * v + (1 - s.beta2) * g * g for v, g in zip(s.v, ga)]
    c1 = 1 - s.beta1 ** t
    c2 = 1 - s.beta2 ** t
    new_arrays = [a - s.lr * (m / c1) / (np.sqrt(v / c2) + s.eps)
                  for a, m, v in zip(p.arrays(), new_m, new_v)]
    n = len(p.weights)
    new_p = MlpParams(new_arrays[:n], new_arrays[n:], p.activation)
    return new_p, OptState(new_m, new_v, t, s.lr, s.beta1, s.beta2, s.eps)


# -- serialisation ----------------------------------------------------------

def params_to_dict(p: MlpParams) -> dict:
    return {"sizes": p.sizes, "activation": p.activation,
            "flat": [float(x) for x in p.flat()]}


def params_from_dict(d) -> MlpParams:
    sizes = d["sizes"]
    flat = np.asarray(d["flat"], dtype=np.float64)
    ws, bs, k = [], [], 0
    shapes = list(zip(sizes[1:], sizes[:-1]))
    for o, i in shapes:
        ws.append(flat[k:k + o * i].reshape(o, i))
        k += o * i
    for o, _ in shapes:
        bs.append(flat[k:k + o].copy())
        k += o
    if k != flat.size:
        raise ValueError("parameter vector length does not match layer sizes")
    return MlpParams(ws, bs, d["activation"])


def opt_to_dict(s: OptState) -> dict:
    return {"step": s.step, "lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps,
            "m": [float(x) for a in s.m for x in a.ravel()],
            "v": [float(x) for a in s.v for x in a.ravel()]}


def opt_from_dict(d, like: MlpParams) -> OptState:
    shapes = [a.shape for a in like.arrays()]

    def unflat(vals):
        vals = np.asarray(vals, dtype=np.float64)
        out, k = [], 0
        for sh in shapes:
            n = int(np.prod(sh))
            out.append(vals[k:k + n].reshape(sh))
            k += n
        return out

    return OptState(unflat(d["m"]), unflat(d["v"]), d["step"], d["lr"], d["beta1"],
                    d["beta2"], d["eps"])
