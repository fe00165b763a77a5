"""Small dense reverse-mode autodiff over numpy arrays.

Every value produced by a forward pass is a :class:`Tensor` that remembers its
parents and a closure propagating the upstream gradient to them. Calling
:func:`backward` on a scalar loss walks that record in reverse topological
order. Shapes follow the batched convention ``(..., rows, features)``, so the
same layer code serves a single sample ``(n, F)`` and a stack ``(S, n, F)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np


def _floating(x) -> np.ndarray:
    """Array view at float64 or wider (extended precision is kept)."""
    arr = np.asarray(x)
    return arr.astype(np.result_type(arr.dtype, np.float64), copy=False)


class Tensor:
    __slots__ = ("data", "grad", "name", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward: Callable[[np.ndarray], None] | None = None):
        self.data = _floating(data)
        self.grad: np.ndarray | None = None
        self.name = name
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        self.grad = g.copy() if self.grad is None else self.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- primitive ops -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, _parents=(a, b))

    def _bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))
    out._backward = _bw
    return out


def matmul_t(x: Tensor, w: Tensor) -> Tensor:
    """x @ w.T with x of shape (..., in) and w of shape (out, in)."""
    out = Tensor(x.data @ w.data.T, _parents=(x, w))

    def _bw(g):
        x._accumulate(g @ w.data)
        w._accumulate(g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1]))
    out._backward = _bw
    return out


def aggregate(adj: np.ndarray, x: Tensor) -> Tensor:
    """Row-mixing by a constant matrix: adj @ x, adj of shape (n, n) or (S, n, n)."""
    adj = _floating(adj)
    out = Tensor(adj @ x.data, _parents=(x,))

    def _bw(g):
        x._accumulate(_unbroadcast(np.swapaxes(adj, -1, -2) @ g, x.shape))
    out._backward = _bw
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0), _parents=(x,))
    out._backward = lambda g: x._accumulate(g * mask)
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y, _parents=(x,))
    out._backward = lambda g: x._accumulate(g * (1.0 - y * y))
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))  # overflow-free logistic
    out = Tensor(y, _parents=(x,))
    out._backward = lambda g: x._accumulate(g * y * (1.0 - y))
    return out


def concat(parts: list[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    out = Tensor(np.concatenate([p.data for p in parts], axis=-1), _parents=tuple(parts))
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])

    def _bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            p._accumulate(g[..., lo:hi])
    out._backward = _bw
    return out


def expand_rows(x: Tensor, n: int) -> Tensor:
    """Repeat a (..., H) vector into (..., n, H) rows."""
    out = Tensor(np.repeat(x.data[..., None, :], n, axis=-2), _parents=(x,))
    out._backward = lambda g: x._accumulate(g.sum(axis=-2))
    return out


def mse_loss(pred: Tensor, target) -> Tensor:
    target = _floating(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    size = max(diff.size, 1)
    out = Tensor(np.sum(diff * diff) / size, _parents=(pred,))
    out._backward = lambda g: pred._accumulate(g * 2.0 * diff / size)
    return out


def weighted_sum(terms: list[tuple[float, Tensor]]) -> Tensor:
    out = Tensor(sum(c * t.data for c, t in terms), _parents=tuple(t for _, t in terms))

    def _bw(g):
        for c, t in terms:
            t._accumulate(c * g)
    out._backward = _bw
    return out


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Returns gradients for every named leaf reachable from the loss; named
    leaves that the loss does not depend on get no entry (callers treat a
    missing entry as zero).
    """
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return {n.name: n.grad for n in order if n.name is not None and not n._parents and n.grad is not None}


# -- layers --------------------------------------------------------------------

@dataclass
class LayerParams:
    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        out_dim = self.weight.shape[0]
        if self.bias.shape != (out_dim,):
            raise ValueError(f"bias shape {self.bias.shape} does not match weight output dim {out_dim}")


@dataclass
class Graph:
    """Directed graph with self-loops; edges are (src, dst) pairs."""

    num_nodes: int
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        edges = set(self.edges)
        for s, d in edges:
            if not (0 <= s < self.num_nodes and 0 <= d < self.num_nodes):
                raise ValueError(f"edge ({s}, {d}) outside {self.num_nodes} nodes")
        edges.update((i, i) for i in range(self.num_nodes))
        self.edges = frozenset(edges)

    def mean_matrix(self) -> np.ndarray:
        """Row i averages node i's in-neighbors (self included)."""
        adj = np.zeros((self.num_nodes, self.num_nodes))
        for s, d in self.edges:
            adj[d, s] = 1.0
        return adj / adj.sum(axis=1, keepdims=True) if self.num_nodes else adj


def affine(layer: LayerParams, x) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != layer.weight.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} != weight input dim {layer.weight.shape[1]}")
    return add(matmul_t(x, layer.weight), layer.bias)


def graph_conv(layer: LayerParams, g: Graph | np.ndarray, x) -> Tensor:
    """relu(W . mean of in-neighbour features + b).

    ``g`` may be a Graph or a precomputed mean matrix of shape (n, n) or (S, n, n).
    """
    x = as_tensor(x)
    adj = g.mean_matrix() if isinstance(g, Graph) else np.asarray(g)
    if adj.shape[-1] != x.shape[-2]:
        raise ValueError(f"graph has {adj.shape[-1]} nodes but features have {x.shape[-2]} rows")
    return relu(affine(layer, aggregate(adj, x)))


def rnn_forward(cell: tuple[LayerParams, LayerParams], sequence) -> Tensor:
    """Final hidden state of h_t = tanh(W_x x_t + W_h h_{t-1} + b), h_0 = 0.

    ``sequence`` is (T, F) or (S, T, F); returns (H,) or (S, H).
    """
    w_in, w_hid = cell
    seq = _floating(sequence.data if isinstance(sequence, Tensor) else sequence)
    hidden = w_hid.weight.shape[0]
    if seq.shape[-1] != w_in.weight.shape[1]:
        raise ValueError(f"sequence width {seq.shape[-1]} != cell input dim {w_in.weight.shape[1]}")
    h = Tensor(np.zeros(seq.shape[:-2] + (hidden,)))
    for t in range(seq.shape[-2]):
        h = tanh(add(affine(w_in, seq[..., t, :]), affine(w_hid, h)))
    return h


# -- parameter containers ------------------------------------------------------

Params = dict[str, np.ndarray]


def leaves(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}


def layer(t: Mapping[str, Tensor], prefix: str) -> LayerParams:
    return LayerParams(t[f"{prefix}.weight"], t[f"{prefix}.bias"])


def init_layer(rng: np.random.Generator, params: Params, prefix: str, n_in: int, n_out: int,
               scale: float = 0.1) -> None:
    params[f"{prefix}.weight"] = rng.uniform(-scale, scale, (n_out, n_in))
    params[f"{prefix}.bias"] = rng.uniform(-scale, scale, n_out)


def count_params(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


@dataclass
class AdamState:
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_update(params: Params, grads: Mapping[str, np.ndarray], state: AdamState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[Params, AdamState]:
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter has {p.shape}")
        m = beta1 * state.m.get(k, np.zeros_like(p)) + (1 - beta1) * g
        v = beta2 * state.v.get(k, np.zeros_like(p)) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_params[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k], new_v[k] = m, v
    return new_params, AdamState(t, new_m, new_v)


def grad_check(model_forward: Callable[[dict[str, Tensor], object], Tensor], params: Params,
               inputs, target, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences of mse_loss.

    Relative error per entry is |a - n| / max(1e-8, |a| + |n|). The probe
    forward runs in extended precision: with a 1e-5 step, float64 roundoff in
    the loss alone is ~1e-12 per difference, which rivals the 1e-8 floor for
    gradients near zero.
    """
    loss = mse_loss(model_forward(leaves(params), inputs), target)
    analytic = backward(loss)
    probe = {k: np.array(v, dtype=np.longdouble) for k, v in params.items()}
    step = np.longdouble(step)

    def loss_at() -> np.longdouble:
        return mse_loss(model_forward(leaves(probe), inputs), target).data[()]

    worst = 0.0
    for name, value in params.items():
        a_grad = analytic.get(name, np.zeros_like(value))
        arr = probe[name]
        for idx in np.ndindex(value.shape):
            centre = arr[idx]
            arr[idx] = centre + step
            up = loss_at()
            arr[idx] = centre - step
            down = loss_at()
            arr[idx] = centre
            numeric = float((up - down) / (2 * step))
            a = float(a_grad[idx])
            worst = max(worst, abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
    return worst


# -- checkpoints ---------------------------------------------------------------
#
# Layout (all integers little-endian):
#   magic      8 bytes  b"POCCKPT1"
#   count      uint32   number of tensors
#   per tensor, in name order:
#     name_len uint16, name utf-8 bytes,
#     ndim     uint8, dims uint32 * ndim,
#     data     float64 little-endian, row-major

MAGIC = b"POCCKPT1"


def save_params(path: str | Path, params: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path: str | Path) -> Params:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    (count,), pos = struct.unpack_from("<I", buf, 8), 12
    params: Params = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return params

