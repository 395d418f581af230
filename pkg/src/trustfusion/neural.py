"""Small evidential networks with hand-written backpropagation.

Functional nets map a view's features to K class evidences.  Referral nets
encode the features, mix the hidden code with the functional opinion vector
``[b; u]`` through a bilinear layer, and emit (trust, distrust) evidence.
Evidence heads use softplus so outputs are always non-negative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

CHECKPOINT_MAGIC = "trustfusion-checkpoint"
CHECKPOINT_VERSION = 1


class StateError(RuntimeError):
    pass


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


_ACTIVATIONS = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0).astype(np.float64)),
    "softplus": (softplus, sigmoid),
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
}


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class DenseLayer:
    def __init__(self, in_dim: int, out_dim: int, activation: str = "relu", rng=None):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.weight = (
            glorot(rng, (in_dim, out_dim), in_dim, out_dim)
            if rng is not None
            else np.zeros((in_dim, out_dim))
        )
        self.bias = np.zeros(out_dim)
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected {self.in_dim} input features, got {x.shape[-1]}")
        z = x @ self.weight + self.bias
        self._cache = (x, z)
        return _ACTIVATIONS[self.activation][0](z)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("backward called before forward")
        x, z = self._cache
        dz = grad_out * _ACTIVATIONS[self.activation][1](z)
        self.grads = {"weight": x.T @ dz, "bias": dz.sum(axis=0)}
        return dz @ self.weight.T


class BilinearLayer:
    """``out_j = h^T W[:, :, j] o + bias_j`` followed by an activation."""

    def __init__(self, h_dim: int, o_dim: int, out_dim: int, activation: str = "relu", rng=None):
        self.activation = activation
        shape = (h_dim, o_dim, out_dim)
        self.weight = (
            glorot(rng, shape, h_dim * o_dim, out_dim) if rng is not None else np.zeros(shape)
        )
        self.bias = np.zeros(out_dim)
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, h: np.ndarray, o: np.ndarray) -> np.ndarray:
        hd, od, out = self.weight.shape
        if h.shape[-1] != hd or o.shape[-1] != od:
            raise ValueError(f"bilinear expects ({hd}, {od}) inputs, got ({h.shape[-1]}, {o.shape[-1]})")
        # hw[b, j, k] = sum_i h[b, i] W[i, j, k]
        hw = (h @ self.weight.reshape(hd, od * out)).reshape(-1, od, out)
        z = np.einsum("bjk,bj->bk", hw, o) + self.bias
        self._cache = (h, o, hw, z)
        return _ACTIVATIONS[self.activation][0](z)

    def backward(self, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self._cache is None:
            raise StateError("backward called before forward")
        h, o, hw, z = self._cache
        hd, od, out = self.weight.shape
        dz = grad_out * _ACTIVATIONS[self.activation][1](z)
        od_dz = (o[:, :, None] * dz[:, None, :]).reshape(-1, od * out)
        self.grads = {
            "weight": (h.T @ od_dz).reshape(hd, od, out),
            "bias": dz.sum(axis=0),
        }
        dh = od_dz @ self.weight.reshape(hd, od * out).T
        do = np.einsum("bjk,bk->bj", hw, dz)
        return dh, do


class _Net:
    layers: dict

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        for lname, layer in self.layers.items():
            for pname, p in layer.params().items():
                yield f"{lname}.{pname}", p

    def named_grads(self) -> Iterator[tuple[str, np.ndarray]]:
        for lname, layer in self.layers.items():
            for pname in layer.params():
                if pname not in layer.grads:
                    raise StateError("gradients requested before backward")
                yield f"{lname}.{pname}", layer.grads[pname]


class FunctionalNet(_Net):
    """features -> hidden (relu) -> K evidences (softplus)."""

    def __init__(self, in_dim: int, k: int, hidden: int | None = None, rng=None):
        hidden = hidden or min(64, in_dim)
        self.layers = {
            "hidden": DenseLayer(in_dim, hidden, "relu", rng),
            "head": DenseLayer(hidden, k, "softplus", rng),
        }

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.layers["head"].forward(self.layers["hidden"].forward(x))

    def backward(self, grad_evidence: np.ndarray) -> np.ndarray:
        return self.layers["hidden"].backward(self.layers["head"].backward(grad_evidence))


class ReferralNet(_Net):
    """(features, [b; u]) -> (trust, distrust) evidence."""

    def __init__(self, in_dim: int, k: int, d_h: int = 32, d_2: int = 16, rng=None):
        self.layers = {
            "encoder": DenseLayer(in_dim, d_h, "relu", rng),
            "bilinear": BilinearLayer(d_h, k + 1, d_2, "relu", rng),
            "head": DenseLayer(d_2, 2, "softplus", rng),
        }

    def forward(self, x: np.ndarray, opinion_vec: np.ndarray) -> np.ndarray:
        h = self.layers["encoder"].forward(x)
        return self.layers["head"].forward(self.layers["bilinear"].forward(h, opinion_vec))

    def backward(self, grad_evidence: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns gradients w.r.t. (features, opinion vector)."""
        dh, do = self.layers["bilinear"].backward(self.layers["head"].backward(grad_evidence))
        return self.layers["encoder"].backward(dh), do


@dataclass
class EvidentialNets:
    functional: list[FunctionalNet]
    referral: list[ReferralNet]

    @classmethod
    def build(cls, dims, k: int, rng: np.random.Generator, hidden=None, d_h=32, d_2=16):
        functional = [FunctionalNet(d, k, hidden, rng) for d in dims]
        referral = [ReferralNet(d, k, d_h, d_2, rng) for d in dims]
        return cls(functional, referral)

    def functional_params(self) -> dict[str, np.ndarray]:
        return {f"functional.{v}.{n}": p for v, net in enumerate(self.functional) for n, p in net.named_params()}

    def referral_params(self) -> dict[str, np.ndarray]:
        return {f"referral.{v}.{n}": p for v, net in enumerate(self.referral) for n, p in net.named_params()}

    def functional_grads(self) -> dict[str, np.ndarray]:
        return {f"functional.{v}.{n}": g for v, net in enumerate(self.functional) for n, g in net.named_grads()}

    def referral_grads(self) -> dict[str, np.ndarray]:
        return {f"referral.{v}.{n}": g for v, net in enumerate(self.referral) for n, g in net.named_grads()}

    def all_params(self) -> dict[str, np.ndarray]:
        return {**self.functional_params(), **self.referral_params()}


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr=None):
    """In-place Adam update with bias correction and decoupled weight decay."""
    lr = state.lr if lr is None else lr
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * ((m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p)
    return params


# -- checkpoint -------------------------------------------------------------


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict[str, str]) -> None:
    """Text checkpoint.

    Line 1: ``trustfusion-checkpoint 1``; then ``meta <key> <value>`` lines;
    then for every tensor a ``tensor <name> <ndim> <dims...>`` line followed by
    one line of row-major values in ``%.17g`` (bit-exact round trip).
    """
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    for key in sorted(meta):
        lines.append(f"meta {key} {meta[key]}")
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float64)
        lines.append(f"tensor {name} {arr.ndim} {' '.join(map(str, arr.shape))}".rstrip())
        lines.append(" ".join(f"{x:.17g}" for x in arr.ravel()))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 2 or head[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if int(head[1]) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {head[1]}")
    meta, params = {}, {}
    i = 1
    while i < len(lines):
        parts = lines[i].split(" ")
        if parts[0] == "meta":
            meta[parts[1]] = " ".join(parts[2:])
            i += 1
        elif parts[0] == "tensor":
            name, ndim = parts[1], int(parts[2])
            shape = tuple(int(d) for d in parts[3 : 3 + ndim])
            values = np.array([float(t) for t in lines[i + 1].split()], dtype=np.float64)
            params[name] = values.reshape(shape)
            i += 2
        else:
            raise ValueError(f"{path}:{i + 1}: unexpected line")
    return params, meta


def assign_params(nets: EvidentialNets, params: dict[str, np.ndarray]) -> None:
    """Copy loaded tensors into a freshly built network set."""
    own = nets.all_params()
    missing = set(own) - set(params)
    if missing:
        raise ValueError(f"checkpoint lacks tensors: {sorted(missing)[:3]}")
    for name, p in own.items():
        if params[name].shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {params[name].shape} vs {p.shape}")
        p[...] = params[name]


# -- single-instance helpers ------------------------------------------------


def functional_forward(net: FunctionalNet, x):
    from .sl_core import DirichletEvidence

    return DirichletEvidence(net.forward(np.asarray(x, dtype=np.float64)[None, :])[0])


def referral_forward(net: ReferralNet, x, func_opinion) -> np.ndarray:
    """(trust, distrust) evidence for one instance given its functional opinion."""
    o = np.asarray(func_opinion.as_vector())[None, :]
    return net.forward(np.asarray(x, dtype=np.float64)[None, :], o)[0]


def backward(net, upstream_grad):
    """Back-propagate evidence gradients; returns the per-parameter gradients."""
    net.backward(np.atleast_2d(upstream_grad))
    return dict(net.named_grads())
