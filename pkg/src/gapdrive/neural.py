"""Minimal dense network stack and the set-invariant Q architecture.

Everything is plain numpy. A SetQNet encodes each surrounding vehicle
triple, sum-pools in a canonical order, decodes the pooled vector, and
scores the concatenation (decoded set, ego statics, gap action features)
with a two-hidden-layer head. Gradients are exact reverse mode.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

RELU = "relu"
IDENTITY = "identity"

DYN_DIM = 3
STATIC_DIM = 3
GAP_DIM = 5


@dataclass
class DenseNet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def forward(self, x: np.ndarray, cache: list | None = None) -> np.ndarray:
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = h @ w + b
            if cache is not None:
                cache.append((h, z))
            h = np.maximum(z, 0.0) if act == RELU else z
        return h

    def backward(self, cache: list, dout: np.ndarray) -> tuple[list, np.ndarray]:
        """Gradients for one cached forward pass; returns (per-layer grads
        ordered as [w0, b0, w1, b1, ...], gradient wrt the input)."""
        grads: list[np.ndarray] = []
        d = dout
        for i in reversed(range(len(self.weights))):
            x, z = cache[i]
            if self.activations[i] == RELU:
                d = d * (z > 0.0)
            grads.append(d.sum(axis=0))           # bias
            grads.append(x.T @ d)                 # weight
            d = d @ self.weights[i].T
        grads.reverse()
        return grads, d


@dataclass
class SetQNet:
    """Per-element encoder, sum pooling, combiner, and output head."""
    encoder: DenseNet
    combiner: DenseNet
    head: DenseNet
    static_dim: int = STATIC_DIM
    gap_dim: int = GAP_DIM
    n_outputs: int = 1

    @property
    def pooled_dim(self) -> int:
        return self.combiner.dims[0]


def _init_dense(dims: list[int], activations: list[str], rng) -> DenseNet:
    ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return DenseNet(ws, bs, list(activations))


def make_qnet(seed: int, encoder_dims=(DYN_DIM, 20, 80), combiner_dims=(80, 80, 20),
              head_hidden=(100, 100), static_dim: int = STATIC_DIM,
              gap_dim: int = GAP_DIM, n_outputs: int = 1) -> SetQNet:
    """Architecture: encoder 3-20-80, combiner 80-80-20, head to n_outputs.

    Hidden layers rectified, module outputs linear. Initialization is
    uniform with fan-in scaling, fully determined by the seed.
    """
    rng = np.random.default_rng(seed)
    enc = _init_dense(list(encoder_dims), [RELU] * (len(encoder_dims) - 2) + [IDENTITY], rng)
    comb = _init_dense(list(combiner_dims), [RELU] * (len(combiner_dims) - 2) + [IDENTITY], rng)
    head_dims = [combiner_dims[-1] + static_dim + gap_dim, *head_hidden, n_outputs]
    head = _init_dense(head_dims, [RELU] * len(head_hidden) + [IDENTITY], rng)
    return SetQNet(enc, comb, head, static_dim, gap_dim, n_outputs)


def parameters(net: SetQNet) -> list[np.ndarray]:
    out = []
    for sub in (net.encoder, net.combiner, net.head):
        for w, b in zip(sub.weights, sub.biases):
            out.extend((w, b))
    return out


def canonical_set(rows: np.ndarray) -> np.ndarray:
    """Rows sorted lexicographically so the pooled sum has a fixed order."""
    if len(rows) <= 1:
        return rows
    order = np.lexsort(rows.T[::-1])
    return rows[order]


def _as_set_array(dynamic) -> np.ndarray:
    arr = np.asarray(dynamic, dtype=float)
    if arr.size == 0:
        return arr.reshape(0, DYN_DIM)
    if arr.ndim != 2:
        raise ValueError(f"dynamic set must be 2-d, got shape {arr.shape}")
    return arr


@dataclass
class ForwardCache:
    seg: np.ndarray
    enc_cache: list
    comb_cache: list
    head_cache: list
    n_sets: int
    set_sizes: list[int]


def forward_batch(net: SetQNet, sets: list, static: np.ndarray,
                  gaps: np.ndarray | None, want_cache: bool = False):
    """Batched forward pass; sets is a list of (k_i, 3) arrays.

    Returns (outputs (B, n_outputs), cache or None).
    """
    static = np.asarray(static, dtype=float)
    b = static.shape[0]
    if static.shape[1] != net.static_dim:
        raise ValueError(f"static dim {static.shape[1]} != {net.static_dim}")
    arrs = [canonical_set(_as_set_array(s)) for s in sets]
    sizes = [len(a) for a in arrs]
    if len(arrs) != b:
        raise ValueError("sets/static batch size mismatch")
    X = np.concatenate(arrs) if sum(sizes) else np.zeros((0, net.encoder.dims[0]))
    if X.shape[1] != net.encoder.dims[0]:
        raise ValueError(f"dynamic dim {X.shape[1]} != {net.encoder.dims[0]}")
    seg = np.repeat(np.arange(b), sizes)

    enc_cache: list | None = [] if want_cache else None
    H = net.encoder.forward(X, enc_cache)
    pooled = np.zeros((b, H.shape[1]))
    np.add.at(pooled, seg, H)

    comb_cache: list | None = [] if want_cache else None
    decoded = net.combiner.forward(pooled, comb_cache)

    parts = [decoded, static]
    if net.gap_dim:
        gaps = np.asarray(gaps, dtype=float)
        if gaps.shape != (b, net.gap_dim):
            raise ValueError(f"gap features must be ({b}, {net.gap_dim})")
        parts.append(gaps)
    head_in = np.concatenate(parts, axis=1)
    head_cache: list | None = [] if want_cache else None
    out = net.head.forward(head_in, head_cache)
    if want_cache:
        return out, ForwardCache(seg, enc_cache, comb_cache, head_cache, b, sizes)
    return out, None


def forward_values(net: SetQNet, dynamic, static, gap=None) -> np.ndarray:
    """Single-state forward; returns the (n_outputs,) value vector."""
    gaps = None if gap is None else np.asarray(gap, dtype=float)[None, :]
    out, _ = forward_batch(net, [dynamic], np.asarray(static, dtype=float)[None, :], gaps)
    return out[0]


def forward_q(net: SetQNet, dynamic, static, gap) -> float:
    """Scalar action value for one (state, gap) pair."""
    if net.n_outputs != 1:
        raise ValueError("forward_q requires a scalar-output head")
    return float(forward_values(net, dynamic, static, gap)[0])


def backward(net: SetQNet, cache: ForwardCache, dout: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients matching parameters(net), given d(loss)/d(outputs)."""
    head_grads, d_head_in = net.head.backward(cache.head_cache, dout)
    d_decoded = d_head_in[:, : net.combiner.dims[-1]]
    comb_grads, d_pooled = net.combiner.backward(cache.comb_cache, d_decoded)
    d_elements = d_pooled[cache.seg]
    enc_grads, _ = net.encoder.backward(cache.enc_cache, d_elements)
    return enc_grads + comb_grads + head_grads


def encode_sets(net: SetQNet, sets: list) -> np.ndarray:
    """Pooled-and-combined representation for each set (forward only)."""
    arrs = [canonical_set(_as_set_array(s)) for s in sets]
    sizes = [len(a) for a in arrs]
    X = np.concatenate(arrs) if sum(sizes) else np.zeros((0, net.encoder.dims[0]))
    seg = np.repeat(np.arange(len(arrs)), sizes)
    H = net.encoder.forward(X)
    pooled = np.zeros((len(arrs), H.shape[1]))
    np.add.at(pooled, seg, H)
    return net.combiner.forward(pooled)


def head_values(net: SetQNet, decoded_rows: np.ndarray, static_rows: np.ndarray,
                gap_rows: np.ndarray | None) -> np.ndarray:
    """Head evaluation on pre-encoded rows; used for candidate fan-out."""
    parts = [decoded_rows, static_rows]
    if net.gap_dim:
        parts.append(gap_rows)
    return net.head.forward(np.concatenate(parts, axis=1))


@dataclass
class AdamState:
    """Adaptive-moment optimizer state; lr per the training configuration."""
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 1e-4) -> "AdamState":
        return cls([np.zeros_like(p) for p in params],
                   [np.zeros_like(p) for p in params], 0, lr)


def optimizer_step(params: list[np.ndarray], grads: list[np.ndarray],
                   state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected adaptive-moment update, in place on params."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    state.t += 1
    b1c = 1.0 - state.beta1 ** state.t
    b2c = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)
    return params, state


def soft_update(target: SetQNet, online: SetQNet, tau: float) -> SetQNet:
    """target <- tau * online + (1 - tau) * target, elementwise."""
    tp, op = parameters(target), parameters(online)
    if len(tp) != len(op) or any(a.shape != b.shape for a, b in zip(tp, op)):
        raise ValueError("architecture mismatch between target and online")
    for a, b in zip(tp, op):
        a *= (1.0 - tau)
        a += tau * b
    return target


def _dense_to_dict(net: DenseNet) -> dict:
    return {
        "activations": net.activations,
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def _dense_from_dict(d: dict) -> DenseNet:
    return DenseNet([np.array(w, dtype=float) for w in d["weights"]],
                    [np.array(b, dtype=float) for b in d["biases"]],
                    list(d["activations"]))


def net_to_dict(net: SetQNet) -> dict:
    return {
        "encoder": _dense_to_dict(net.encoder),
        "combiner": _dense_to_dict(net.combiner),
        "head": _dense_to_dict(net.head),
        "static_dim": net.static_dim,
        "gap_dim": net.gap_dim,
        "n_outputs": net.n_outputs,
    }


def net_from_dict(d: dict) -> SetQNet:
    return SetQNet(_dense_from_dict(d["encoder"]), _dense_from_dict(d["combiner"]),
                   _dense_from_dict(d["head"]), d["static_dim"], d["gap_dim"],
                   d["n_outputs"])


def save_net(net: SetQNet, path: str):
    with open(path, "w") as fh:
        json.dump(net_to_dict(net), fh)


def load_net(path: str) -> SetQNet:
    with open(path) as fh:
        return net_from_dict(json.load(fh))
