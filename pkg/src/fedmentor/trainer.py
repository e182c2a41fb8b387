"""Client-side model and the local SGD loop.

The model is a small dense network with a frozen backbone: per layer an
immutable weight matrix plus a low-rank adapter pair, tanh between layers,
and a frozen linear head producing one logit. Only adapter entries ever
receive gradient; the backbone and head never change, which the checksum
makes easy to assert.

tanh is used between layers (rather than ReLU) so the analytic gradients can
be validated against central finite differences without subgradient
headaches. Gradients are derived by hand: with effective weight
E = W + B@A per layer, dL/dB = G @ A^T and dL/dA = B^T @ G where G is the
gradient with respect to E.
"""
from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .linalg import Matrix, Rng, ShapeError, axpy
from .lora import AdapterSet, LoraPair

__all__ = [
    "BackboneModel",
    "ClientState",
    "TrainStats",
    "init_adapters",
    "forward",
    "forward_batch",
    "loss",
    "mean_loss",
    "grad_adapters",
    "train_local",
]


@dataclass(frozen=True)
class BackboneModel:
    """Frozen dense backbone: per-layer weights plus a linear readout head."""

    layers: tuple[Matrix, ...]
    head: Matrix  # 1 x d_last

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("backbone needs at least one layer")
        for i in range(1, len(self.layers)):
            if self.layers[i].cols != self.layers[i - 1].rows:
                raise ShapeError(
                    f"layer {i} expects input dim {self.layers[i].cols}, "
                    f"layer {i - 1} outputs {self.layers[i - 1].rows}"
                )
        if self.head.rows != 1 or self.head.cols != self.layers[-1].rows:
            raise ShapeError(
                f"head must be 1x{self.layers[-1].rows}, got {self.head.rows}x{self.head.cols}"
            )

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].cols

    def checksum(self) -> str:
        """SHA-256 over all frozen weights; constant across any training."""
        h = hashlib.sha256()
        for w in self.layers:
            h.update(w.array.tobytes())
        h.update(self.head.array.tobytes())
        return h.hexdigest()

    @classmethod
    def random(cls, rng: Rng, input_dim: int, hidden_dim: int, n_layers: int) -> "BackboneModel":
        """Random frozen backbone, entries scaled by 1/sqrt(fan_in)."""
        layers = []
        fan_in = input_dim
        for i in range(n_layers):
            w = rng.derive("layer", i).standard_normal(hidden_dim, fan_in) / np.sqrt(fan_in)
            layers.append(Matrix(w))
            fan_in = hidden_dim
        head = rng.derive("head").standard_normal(1, fan_in) / np.sqrt(fan_in)
        return cls(tuple(layers), Matrix(head))


def init_adapters(model: BackboneModel, rank: int, rng: Rng, a_std: float = 0.01) -> AdapterSet:
    """Fresh adapters: A from a small Gaussian, B at zero, so delta starts at 0."""
    pairs = []
    for i, w in enumerate(model.layers):
        d, k = w.rows, w.cols
        if rank > min(d, k):
            raise ValueError(f"rank {rank} too large for layer {i} ({d}x{k})")
        a = rng.derive("adapter-a", i).standard_normal(rank, k) * a_std
        pairs.append(LoraPair(i, Matrix(a), Matrix.zeros(d, rank)))
    return AdapterSet(tuple(pairs), model.n_layers)


def _check_conformable(model: BackboneModel, adapters: AdapterSet) -> None:
    if adapters.total_layers != model.n_layers or len(adapters.pairs) != model.n_layers:
        raise ShapeError(
            f"adapter set covers {len(adapters.pairs)}/{adapters.total_layers} layers, "
            f"model has {model.n_layers}"
        )
    for pair, w in zip(adapters.pairs, model.layers):
        if pair.d != w.rows or pair.k != w.cols:
            raise ShapeError(
                f"adapter at layer {pair.layer_index} is {pair.d}x{pair.k}, "
                f"weight is {w.rows}x{w.cols}"
            )


def _effective_weights(model: BackboneModel, adapters: AdapterSet) -> list[np.ndarray]:
    _check_conformable(model, adapters)
    return [
        w.array + pair.b.array @ pair.a.array
        for w, pair in zip(model.layers, adapters.pairs)
    ]


def forward_batch(model: BackboneModel, adapters: AdapterSet, xs: np.ndarray) -> np.ndarray:
    """Logits for a batch of feature rows (n, input_dim) -> (n,).

    tanh sits between consecutive layers only; the last layer feeds the head
    linearly, so a one-layer model with identity effective weight is exactly
    the head.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != model.input_dim:
        raise ShapeError(f"batch shape {xs.shape} does not match input dim {model.input_dim}")
    effs = _effective_weights(model, adapters)
    act = xs
    for eff in effs[:-1]:
        act = np.tanh(act @ eff.T)
    act = act @ effs[-1].T
    return act @ model.head.array[0]


def forward(model: BackboneModel, adapters: AdapterSet, x) -> float:
    """Single-sample logit."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return float(forward_batch(model, adapters, x)[0])


def loss(logit: float, label: int) -> float:
    """Binary cross-entropy with sigmoid, in the stable log-sum-exp form."""
    z = float(logit)
    y = float(label)
    return max(z, 0.0) - z * y + np.log1p(np.exp(-abs(z)))


def mean_loss(model: BackboneModel, adapters: AdapterSet, xs: np.ndarray, ys: np.ndarray) -> float:
    zs = forward_batch(model, adapters, xs)
    ys = np.asarray(ys, dtype=np.float64)
    return float(np.mean(np.maximum(zs, 0.0) - zs * ys + np.log1p(np.exp(-np.abs(zs)))))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def grad_adapters(
    model: BackboneModel,
    adapters: AdapterSet,
    xs: np.ndarray,
    ys: np.ndarray,
) -> AdapterSet:
    """Mean batch gradient of the loss w.r.t. every A and B entry.

    Returned in adapter-set shape so SGD steps are a per-matrix axpy. The
    backbone gradient is never formed into updates.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise ValueError("grad_adapters needs a nonempty 2-D batch")

    eff = _effective_weights(model, adapters)
    last = model.n_layers - 1
    acts = [xs]
    for l, e in enumerate(eff):
        pre = acts[-1] @ e.T
        acts.append(np.tanh(pre) if l < last else pre)
    logits = acts[-1] @ model.head.array[0]

    n = xs.shape[0]
    dlogit = (_sigmoid(logits) - ys) / n  # (n,)
    g_act = np.outer(dlogit, model.head.array[0])  # (n, d_last)

    grads: list[LoraPair] = []
    for l in range(last, -1, -1):
        # The final layer is linear into the head; earlier ones pass tanh.
        g_z = g_act if l == last else g_act * (1.0 - acts[l + 1] ** 2)
        g_eff = g_z.T @ acts[l]  # (d_l, d_{l-1})
        pair = adapters.pairs[l]
        g_b = g_eff @ pair.a.array.T
        g_a = pair.b.array.T @ g_eff
        grads.append(LoraPair(pair.layer_index, Matrix(g_a), Matrix(g_b)))
        if l > 0:
            g_act = g_z @ eff[l]
    return AdapterSet(tuple(reversed(grads)), adapters.total_layers)


@dataclass(frozen=True)
class ClientState:
    """One client: its data, backbone view, adapters, and hyperparameters."""

    id: int
    domain: str
    data: Dataset
    model: BackboneModel
    adapters: AdapterSet
    learning_rate: float
    local_epochs: int
    batch_size: int

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.local_epochs < 0:
            raise ValueError(f"local_epochs must be >= 0, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.data.input_dim != self.model.input_dim:
            raise ShapeError(
                f"client {self.id}: data dim {self.data.input_dim} vs "
                f"model dim {self.model.input_dim}"
            )
        _check_conformable(self.model, self.adapters)


@dataclass(frozen=True)
class TrainStats:
    final_train_loss: float
    final_eval_loss: float
    steps: int
    wall_time: float


def _sgd_step(adapters: AdapterSet, grads: AdapterSet, lr: float) -> AdapterSet:
    pairs = []
    for p, g in zip(adapters.pairs, grads.pairs):
        pairs.append(
            LoraPair(p.layer_index, axpy(-lr, g.a, p.a), axpy(-lr, g.b, p.b))
        )
    return AdapterSet(tuple(pairs), adapters.total_layers)


def train_local(
    client: ClientState,
    global_adapters: AdapterSet,
    rng: Rng,
) -> tuple[AdapterSet, TrainStats]:
    """Run the client's local epochs of minibatch SGD from the global adapters.

    The caller hands an rng already scoped to (run seed, client, round); each
    epoch derives its own shuffle stream from it, so results depend only on
    (client state, global adapters, rng identity) and never on scheduling.
    Minibatches follow the shuffled order with the last partial batch kept.
    Only adapter weights change; the returned stats carry post-training mean
    losses on the full train and validation splits.
    """
    started = time.perf_counter()
    _check_conformable(client.model, global_adapters)
    adapters = global_adapters
    xs, ys = client.data.train_x, client.data.train_y
    n = xs.shape[0]
    steps = 0
    for epoch in range(client.local_epochs):
        order = rng.derive("epoch", epoch, "shuffle").permutation(n)
        for start in range(0, n, client.batch_size):
            batch = order[start : start + client.batch_size]
            grads = grad_adapters(client.model, adapters, xs[batch], ys[batch])
            adapters = _sgd_step(adapters, grads, client.learning_rate)
            steps += 1
    stats = TrainStats(
        final_train_loss=mean_loss(client.model, adapters, xs, ys),
        final_eval_loss=mean_loss(client.model, adapters, client.data.val_x, client.data.val_y),
        steps=steps,
        wall_time=time.perf_counter() - started,
    )
    return adapters, stats
