"""Small dense networks with frozen base weights and low-rank adapters.

Each layer computes (w0 + scale * b @ a) @ x with w0 frozen; only the
factors b and a train.  Samples sit in columns, so a batch of k inputs is
a (dim, k) array.  The hidden layers share one activation; the final layer
is linear and feeds either mean squared error (column-wise, averaged over
the batch) or softmax cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import Matrix, Rng, ShapeError, as_matrix

ACTIVATIONS = ("tanh", "relu", "identity")
LOSS_KINDS = ("mse", "softmax-ce")


class PerturbationStateError(RuntimeError):
    """A perturbation handle was used outside its apply/revert lifecycle."""


@dataclass
class LoRALinear:
    """One adapted layer: frozen w0 (n x m), trainable b (n x r), a (r x m)."""

    w0: Matrix
    b: Matrix
    a: Matrix
    scale: float
    rank: int

    def __post_init__(self) -> None:
        self.w0 = as_matrix(self.w0)
        self.b = as_matrix(self.b)
        self.a = as_matrix(self.a)
        n, m = self.w0.shape
        if self.rank < 1 or self.rank > min(n, m):
            raise ShapeError(f"rank {self.rank} invalid for a {n} x {m} layer")
        if self.b.shape != (n, self.rank):
            raise ShapeError(f"b must be {(n, self.rank)}, got {self.b.shape}")
        if self.a.shape != (self.rank, m):
            raise ShapeError(f"a must be {(self.rank, m)}, got {self.a.shape}")
        if not (self.scale > 0.0 and np.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")

    @property
    def out_dim(self) -> int:
        return self.w0.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w0.shape[1]

    def merged_weight(self) -> Matrix:
        """The effective dense weight w0 + scale * b @ a."""
        return self.w0 + self.scale * (self.b @ self.a)


@dataclass
class Batch:
    """Column-major sample batch: inputs (d_in, k), targets (d_out, k)."""

    inputs: Matrix
    targets: Matrix

    def __post_init__(self) -> None:
        self.inputs = as_matrix(self.inputs)
        self.targets = as_matrix(self.targets)
        if self.inputs.shape[1] != self.targets.shape[1]:
            raise ShapeError(
                f"inputs have {self.inputs.shape[1]} columns but targets have "
                f"{self.targets.shape[1]}"
            )
        if self.inputs.shape[1] < 1:
            raise ShapeError("a batch needs at least one sample column")

    @property
    def size(self) -> int:
        return self.inputs.shape[1]


@dataclass
class Network:
    """A stack of adapted layers with an activation and a loss choice."""

    layers: list[LoRALinear]
    activation: str = "tanh"
    loss_kind: str = "mse"

    def __post_init__(self) -> None:
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        for left, right in zip(self.layers, self.layers[1:]):
            if right.in_dim != left.out_dim:
                raise ShapeError(
                    f"layer output dim {left.out_dim} feeds layer expecting "
                    f"{right.in_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim


@dataclass
class GradientSet:
    """Per-layer adapter gradients, the loss they were taken at, and
    optionally the merged-weight gradients."""

    grad_b: list[Matrix]
    grad_a: list[Matrix]
    loss: float
    grad_w: list[Matrix] | None = None


def kaiming_matrix(rng: Rng, rows: int, cols: int, fan_in: int) -> Matrix:
    """Gaussian entries scaled by sqrt(2 / fan_in)."""
    return rng.standard_normal((rows, cols)) * np.sqrt(2.0 / fan_in)


def make_lora_layer(w0: Matrix, rank: int, scale: float, rng: Rng) -> LoRALinear:
    """Adapter factors for a frozen weight: a is Kaiming-scaled Gaussian with
    fan_in equal to the layer input dim, b starts at zero so the merged
    weight initially equals w0."""
    w0 = as_matrix(w0)
    n, m = w0.shape
    a = kaiming_matrix(rng, rank, m, fan_in=m)
    b = np.zeros((n, rank))
    return LoRALinear(w0=w0, b=b, a=a, scale=scale, rank=rank)


def build_network(
    layer_dims: list[int],
    rank: int,
    scale: float,
    rng: Rng,
    activation: str = "tanh",
    loss_kind: str = "mse",
    w0_list: list[Matrix] | None = None,
) -> Network:
    """Assemble a network from a dim chain [d0, d1, ..., dL].

    w0_list supplies the frozen weights (copied); when omitted they are
    Gaussian scaled by 1/sqrt(fan_in).
    """
    if len(layer_dims) < 2:
        raise ShapeError("layer_dims needs at least an input and an output dim")
    layers = []
    for i, (m, n) in enumerate(zip(layer_dims, layer_dims[1:])):
        if w0_list is not None:
            w0 = as_matrix(w0_list[i]).copy()
            if w0.shape != (n, m):
                raise ShapeError(f"w0[{i}] must be {(n, m)}, got {w0.shape}")
        else:
            w0 = rng.standard_normal((n, m)) / np.sqrt(m)
        layers.append(make_lora_layer(w0, rank=rank, scale=scale, rng=rng))
    return Network(layers=layers, activation=activation, loss_kind=loss_kind)


def clone_network(net: Network) -> Network:
    """Independent deep copy; mutating the clone never touches the source."""
    layers = [
        LoRALinear(
            w0=layer.w0.copy(),
            b=layer.b.copy(),
            a=layer.a.copy(),
            scale=layer.scale,
            rank=layer.rank,
        )
        for layer in net.layers
    ]
    return Network(layers=layers, activation=net.activation, loss_kind=net.loss_kind)


def _activate(z: Matrix, kind: str) -> Matrix:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(y: Matrix, kind: str) -> Matrix:
    # Written in terms of the activation output, which backward caches.
    if kind == "tanh":
        return 1.0 - y * y
    if kind == "relu":
        return (y > 0.0).astype(np.float64)
    return np.ones_like(y)


def _loss_and_grad(pred: Matrix, targets: Matrix, kind: str):
    """Loss value and its gradient with respect to pred."""
    k = pred.shape[1]
    if kind == "mse":
        resid = pred - targets
        loss = 0.5 * float(np.sum(resid * resid)) / k
        return loss, resid / k
    # softmax-ce: column-wise softmax, targets are probability columns.
    shifted = pred - pred.max(axis=0, keepdims=True)
    exp = np.exp(shifted)
    z = exp.sum(axis=0, keepdims=True)
    log_probs = shifted - np.log(z)
    loss = -float(np.sum(targets * log_probs)) / k
    return loss, (exp / z - targets) / k


def _check_batch(net: Network, batch: Batch) -> None:
    if batch.inputs.shape[0] != net.in_dim:
        raise ShapeError(
            f"batch inputs have dim {batch.inputs.shape[0]}, network expects "
            f"{net.in_dim}"
        )
    if batch.targets.shape[0] != net.out_dim:
        raise ShapeError(
            f"batch targets have dim {batch.targets.shape[0]}, network "
            f"produces {net.out_dim}"
        )


def forward(net: Network, batch: Batch) -> tuple[Matrix, float]:
    """Predictions and loss at the current parameters."""
    _check_batch(net, batch)
    last = len(net.layers) - 1
    h = batch.inputs
    for i, layer in enumerate(net.layers):
        z = layer.w0 @ h + layer.scale * (layer.b @ (layer.a @ h))
        h = _activate(z, net.activation) if i < last else z
    loss, _ = _loss_and_grad(h, batch.targets, net.loss_kind)
    return h, loss


def forward_with_offsets(
    net: Network, batch: Batch, offsets: list[Matrix | None]
) -> tuple[Matrix, float]:
    """Forward pass with a dense additive offset on each merged weight.

    offsets[i] is added to layer i's effective weight (None skips a layer);
    the stored parameters are never touched.  This is how full-space
    perturbations are evaluated without materialising a perturbed network.
    """
    _check_batch(net, batch)
    if len(offsets) != len(net.layers):
        raise ShapeError(
            f"got {len(offsets)} offsets for {len(net.layers)} layers"
        )
    last = len(net.layers) - 1
    h = batch.inputs
    for i, layer in enumerate(net.layers):
        z = layer.w0 @ h + layer.scale * (layer.b @ (layer.a @ h))
        off = offsets[i]
        if off is not None:
            if off.shape != layer.w0.shape:
                raise ShapeError(
                    f"offset {i} must be {layer.w0.shape}, got {off.shape}"
                )
            z = z + off @ h
        h = _activate(z, net.activation) if i < last else z
    loss, _ = _loss_and_grad(h, batch.targets, net.loss_kind)
    return h, loss


def backward(net: Network, batch: Batch, want_full: bool = False) -> GradientSet:
    """Adapter gradients (and optionally merged-weight gradients) by
    reverse accumulation.

    grad_b and grad_a come out of the factored chain rule directly, never
    through the merged-weight gradient, so the factored and merged routes
    stay independent checks of each other.
    """
    _check_batch(net, batch)
    last = len(net.layers) - 1
    h = batch.inputs
    inputs_cache: list[Matrix] = []
    ax_cache: list[Matrix] = []
    out_cache: list[Matrix] = []
    for i, layer in enumerate(net.layers):
        inputs_cache.append(h)
        ax = layer.a @ h
        ax_cache.append(ax)
        z = layer.w0 @ h + layer.scale * (layer.b @ ax)
        h = _activate(z, net.activation) if i < last else z
        out_cache.append(h)

    loss, g = _loss_and_grad(h, batch.targets, net.loss_kind)
    grad_b: list[Matrix | None] = [None] * len(net.layers)
    grad_a: list[Matrix | None] = [None] * len(net.layers)
    grad_w: list[Matrix | None] = [None] * len(net.layers) if want_full else None
    for i in range(last, -1, -1):
        layer = net.layers[i]
        if i < last:
            g = g * _activation_grad(out_cache[i], net.activation)
        x_in = inputs_cache[i]
        bt_g = layer.b.T @ g
        grad_b[i] = layer.scale * (g @ ax_cache[i].T)
        grad_a[i] = layer.scale * (bt_g @ x_in.T)
        if want_full:
            grad_w[i] = g @ x_in.T
        if i > 0:
            g = layer.w0.T @ g + layer.scale * (layer.a.T @ bt_g)
    return GradientSet(grad_b=grad_b, grad_a=grad_a, loss=loss, grad_w=grad_w)


def effective_full_perturbation(e_b: Matrix, a: Matrix, scale: float) -> Matrix:
    """Dense weight change induced by shifting b by e_b: scale * e_b @ a."""
    e_b = as_matrix(e_b)
    a = as_matrix(a)
    if e_b.shape[1] != a.shape[0]:
        raise ShapeError(f"cannot multiply {e_b.shape} @ {a.shape}")
    return scale * (e_b @ a)


@dataclass
class PerturbationHandle:
    """Undo token for an in-place adapter perturbation.

    Applying a perturbation swaps in freshly allocated factor arrays; the
    handle keeps the originals, so revert restores them bit for bit (the
    very objects come back, no arithmetic involved).  Usable as a context
    manager; revert is one-shot.
    """

    net: Network
    saved_b: list[Matrix | None]
    saved_a: list[Matrix | None]
    reverted: bool = field(default=False)

    def revert(self) -> None:
        if self.reverted:
            raise PerturbationStateError("perturbation already reverted")
        for i, layer in enumerate(self.net.layers):
            if self.saved_b[i] is not None:
                layer.b = self.saved_b[i]
            if self.saved_a[i] is not None:
                layer.a = self.saved_a[i]
        self.reverted = True

    def __enter__(self) -> "PerturbationHandle":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if not self.reverted:
            self.revert()


def apply_perturbation(
    net: Network,
    e_b: list[Matrix | None] | None = None,
    e_a: list[Matrix | None] | None = None,
) -> PerturbationHandle:
    """Shift adapter factors in place: b += e_b[i], a += e_a[i] per layer.

    Either list may be None (or hold None entries) to leave factors alone.
    Returns the handle that restores the pre-perturbation arrays.
    """
    n_layers = len(net.layers)
    for name, lst in (("e_b", e_b), ("e_a", e_a)):
        if lst is not None and len(lst) != n_layers:
            raise ShapeError(f"{name} has {len(lst)} entries for {n_layers} layers")
    saved_b: list[Matrix | None] = [None] * n_layers
    saved_a: list[Matrix | None] = [None] * n_layers
    for i, layer in enumerate(net.layers):
        shift_b = e_b[i] if e_b is not None else None
        shift_a = e_a[i] if e_a is not None else None
        if shift_b is not None:
            if shift_b.shape != layer.b.shape:
                raise ShapeError(
                    f"e_b[{i}] must be {layer.b.shape}, got {shift_b.shape}"
                )
            saved_b[i] = layer.b
            layer.b = layer.b + shift_b
        if shift_a is not None:
            if shift_a.shape != layer.a.shape:
                raise ShapeError(
                    f"e_a[{i}] must be {layer.a.shape}, got {shift_a.shape}"
                )
            saved_a[i] = layer.a
            layer.a = layer.a + shift_a
    return PerturbationHandle(net=net, saved_b=saved_b, saved_a=saved_a)


def apply_b_perturbation(net: Network, e_b: list[Matrix | None]) -> PerturbationHandle:
    """Perturb only the b factors; the common case for transferred
    full-space directions."""
    return apply_perturbation(net, e_b=e_b, e_a=None)
