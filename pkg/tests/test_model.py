"""Forward/backward correctness for adapted networks: merged-weight
equivalence, finite-difference gradient checks, and the perturbation
apply/revert lifecycle."""

import numpy as np
import pytest

from flatlora.linalg import ShapeError, make_rng
from flatlora.model import (
    Batch,
    LoRALinear,
    Network,
    PerturbationStateError,
    apply_b_perturbation,
    apply_perturbation,
    backward,
    build_network,
    clone_network,
    effective_full_perturbation,
    forward,
    forward_with_offsets,
    make_lora_layer,
)

FD_STEP = 1e-6
FD_TOL = 1e-4


def small_net(seed=0, dims=(5, 4, 3), rank=2, activation="tanh", loss="mse", scale=1.0):
    rng = make_rng(seed)
    net = build_network(list(dims), rank=rank, scale=scale, rng=rng,
                        activation=activation, loss_kind=loss)
    # Nonzero b so gradients and merged weights are nontrivial.
    for layer in net.layers:
        layer.b = rng.standard_normal(layer.b.shape) * 0.3
    return net


def random_batch(net, seed=0, k=7):
    rng = make_rng([seed, 99])
    inputs = rng.standard_normal((net.in_dim, k))
    if net.loss_kind == "softmax-ce":
        targets = np.zeros((net.out_dim, k))
        targets[rng.integers(0, net.out_dim, size=k), np.arange(k)] = 1.0
    else:
        targets = rng.standard_normal((net.out_dim, k))
    return Batch(inputs=inputs, targets=targets)


# ---------------------------------------------------------------- construction

def test_layer_shape_validation():
    w0 = np.zeros((4, 6))
    with pytest.raises(ShapeError):
        LoRALinear(w0=w0, b=np.zeros((4, 2)), a=np.zeros((3, 6)), scale=1.0, rank=2)
    with pytest.raises(ShapeError):
        LoRALinear(w0=w0, b=np.zeros((5, 2)), a=np.zeros((2, 6)), scale=1.0, rank=2)
    with pytest.raises(ShapeError):
        LoRALinear(w0=w0, b=np.zeros((4, 5)), a=np.zeros((5, 6)), scale=1.0, rank=5)
    with pytest.raises(ValueError):
        LoRALinear(w0=w0, b=np.zeros((4, 2)), a=np.zeros((2, 6)), scale=0.0, rank=2)


def test_network_adjacency_validation():
    rng = make_rng(0)
    l1 = make_lora_layer(rng.standard_normal((4, 5)), rank=2, scale=1.0, rng=rng)
    l2 = make_lora_layer(rng.standard_normal((3, 7)), rank=2, scale=1.0, rng=rng)
    with pytest.raises(ShapeError):
        Network(layers=[l1, l2])
    with pytest.raises(ValueError):
        Network(layers=[l1], activation="gelu")
    with pytest.raises(ValueError):
        Network(layers=[l1], loss_kind="hinge")
    with pytest.raises(ShapeError):
        build_network([5], rank=1, scale=1.0, rng=rng)


def test_batch_validation():
    with pytest.raises(ShapeError):
        Batch(inputs=np.zeros((3, 4)), targets=np.zeros((2, 5)))
    with pytest.raises(ShapeError):
        Batch(inputs=np.zeros((3, 0)), targets=np.zeros((2, 0)))
    b = Batch(inputs=np.zeros((3, 4)), targets=np.zeros((2, 4)))
    assert b.size == 4


def test_initial_adapter_is_identity_on_base():
    """b starts at zero, so the adapted net equals the frozen base net."""
    rng = make_rng(3)
    net = build_network([6, 5, 2], rank=2, scale=7.0, rng=rng)
    for layer in net.layers:
        assert np.array_equal(layer.b, np.zeros_like(layer.b))
        assert np.array_equal(layer.merged_weight(), layer.w0)


def test_kaiming_scale_of_a_factor():
    """Entries of a have variance about 2/fan_in."""
    rng = make_rng(4)
    net = build_network([400, 300], rank=64, scale=1.0, rng=rng)
    a = net.layers[0].a
    observed = float(np.var(a))
    assert abs(observed - 2.0 / 400) < 0.3 * (2.0 / 400)


# ------------------------------------------------------------------- forward

def test_forward_matches_dense_merged_network():
    """Running the factored net equals running a plain dense net built from
    the merged weights, for every activation and loss."""
    for activation in ("tanh", "relu", "identity"):
        for loss in ("mse", "softmax-ce"):
            net = small_net(seed=11, activation=activation, loss=loss, scale=0.5)
            batch = random_batch(net, seed=11)
            pred, loss_val = forward(net, batch)

            h = batch.inputs
            last = len(net.layers) - 1
            for i, layer in enumerate(net.layers):
                h = layer.merged_weight() @ h
                if i < last:
                    if activation == "tanh":
                        h = np.tanh(h)
                    elif activation == "relu":
                        h = np.maximum(h, 0.0)
            assert np.max(np.abs(pred - h)) < 1e-12
            assert np.isfinite(loss_val)


def test_mse_loss_hand_value():
    layer = LoRALinear(w0=np.array([[2.0]]), b=np.zeros((1, 1)),
                       a=np.ones((1, 1)), scale=1.0, rank=1)
    net = Network(layers=[layer], loss_kind="mse")
    batch = Batch(inputs=np.array([[1.0, 2.0]]), targets=np.array([[1.0, 1.0]]))
    # preds = [2, 4]; residuals [1, 3]; loss = 0.5 * (1 + 9) / 2 = 2.5
    _, loss = forward(net, batch)
    assert abs(loss - 2.5) < 1e-15


def test_softmax_ce_loss_hand_value():
    layer = LoRALinear(w0=np.eye(2), b=np.zeros((2, 1)),
                       a=np.zeros((1, 2)), scale=1.0, rank=1)
    net = Network(layers=[layer], loss_kind="softmax-ce")
    batch = Batch(inputs=np.array([[1.0], [0.0]]), targets=np.array([[1.0], [0.0]]))
    # logits (1, 0); p(class 0) = e / (e + 1); loss = log(1 + e^-1)
    _, loss = forward(net, batch)
    assert abs(loss - np.log1p(np.exp(-1.0))) < 1e-12


def test_softmax_ce_shift_invariance():
    """Large logits must not overflow thanks to the max-shift."""
    layer = LoRALinear(w0=np.eye(2) * 500.0, b=np.zeros((2, 1)),
                       a=np.zeros((1, 2)), scale=1.0, rank=1)
    net = Network(layers=[layer], loss_kind="softmax-ce")
    batch = Batch(inputs=np.array([[1.0], [1.0]]), targets=np.array([[1.0], [0.0]]))
    _, loss = forward(net, batch)
    assert np.isfinite(loss) and abs(loss - np.log(2.0)) < 1e-12


def test_forward_rejects_mismatched_batch():
    net = small_net()
    with pytest.raises(ShapeError):
        forward(net, Batch(inputs=np.zeros((net.in_dim + 1, 2)),
                           targets=np.zeros((net.out_dim, 2))))
    with pytest.raises(ShapeError):
        forward(net, Batch(inputs=np.zeros((net.in_dim, 2)),
                           targets=np.zeros((net.out_dim + 1, 2))))


def test_forward_with_offsets_matches_merged_shift():
    """Adding a dense offset equals rebuilding the net with w0 shifted."""
    net = small_net(seed=21)
    batch = random_batch(net, seed=21)
    rng = make_rng(22)
    offsets = [rng.standard_normal(layer.w0.shape) * 0.01 for layer in net.layers]

    shifted = clone_network(net)
    for layer, off in zip(shifted.layers, offsets):
        layer.w0 = layer.w0 + off
    _, expected = forward(shifted, batch)
    _, got = forward_with_offsets(net, batch, offsets)
    assert abs(got - expected) < 1e-12

    # None entries skip layers; all-None equals the plain forward.
    _, base = forward(net, batch)
    _, same = forward_with_offsets(net, batch, [None] * len(net.layers))
    assert same == base


def test_forward_with_offsets_validation():
    net = small_net()
    batch = random_batch(net)
    with pytest.raises(ShapeError):
        forward_with_offsets(net, batch, [None])
    bad = [np.zeros((1, 1))] + [None] * (len(net.layers) - 1)
    with pytest.raises(ShapeError):
        forward_with_offsets(net, batch, bad)


# ------------------------------------------------------------------ backward

def fd_gradient(net, batch, layer_index, which, step=FD_STEP):
    """Central finite differences through the loss, entry by entry."""
    layer = net.layers[layer_index]
    target = layer.b if which == "b" else layer.a
    grad = np.zeros_like(target)
    for i in range(target.shape[0]):
        for j in range(target.shape[1]):
            old = target[i, j]
            target[i, j] = old + step
            _, up = forward(net, batch)
            target[i, j] = old - step
            _, down = forward(net, batch)
            target[i, j] = old
            grad[i, j] = (up - down) / (2.0 * step)
    return grad


@pytest.mark.parametrize("activation", ["tanh", "relu", "identity"])
@pytest.mark.parametrize("loss", ["mse", "softmax-ce"])
def test_backward_matches_finite_differences(activation, loss):
    net = small_net(seed=31, activation=activation, loss=loss, scale=0.7)
    batch = random_batch(net, seed=31)
    grads = backward(net, batch)
    _, loss_val = forward(net, batch)
    assert abs(grads.loss - loss_val) < 1e-14
    for idx in range(len(net.layers)):
        for which, got in (("b", grads.grad_b[idx]), ("a", grads.grad_a[idx])):
            want = fd_gradient(net, batch, idx, which)
            denom = max(np.max(np.abs(want)), 1e-12)
            assert np.max(np.abs(got - want)) / denom < FD_TOL, (
                f"layer {idx} grad_{which} mismatch under {activation}/{loss}"
            )


def test_merged_gradient_matches_finite_differences():
    """grad_w from want_full=True differentiates the merged weight."""
    net = small_net(seed=41)
    batch = random_batch(net, seed=41)
    grads = backward(net, batch, want_full=True)
    step = FD_STEP
    for idx, layer in enumerate(net.layers):
        want = np.zeros_like(layer.w0)
        for i in range(layer.w0.shape[0]):
            for j in range(layer.w0.shape[1]):
                old = layer.w0[i, j]
                layer.w0[i, j] = old + step
                _, up = forward(net, batch)
                layer.w0[i, j] = old - step
                _, down = forward(net, batch)
                layer.w0[i, j] = old
                want[i, j] = (up - down) / (2.0 * step)
        denom = max(np.max(np.abs(want)), 1e-12)
        assert np.max(np.abs(grads.grad_w[idx] - want)) / denom < FD_TOL


def test_factor_gradients_satisfy_chain_identity():
    """grad_b = scale * grad_w @ a.T and grad_a = scale * b.T @ grad_w,
    tying the factored route to the merged route exactly."""
    net = small_net(seed=51, dims=(6, 5, 4, 2), rank=2)
    batch = random_batch(net, seed=51)
    grads = backward(net, batch, want_full=True)
    for layer, gb, ga, gw in zip(net.layers, grads.grad_b, grads.grad_a, grads.grad_w):
        assert np.max(np.abs(gb - layer.scale * (gw @ layer.a.T))) < 1e-10
        assert np.max(np.abs(ga - layer.scale * (layer.b.T @ gw))) < 1e-10


def test_backward_default_skips_full_gradients():
    net = small_net()
    assert backward(net, random_batch(net)).grad_w is None


# -------------------------------------------------------------- perturbation

def test_effective_full_perturbation_value():
    e_b = np.array([[1.0], [0.0]])
    a = np.array([[2.0, 3.0]])
    out = effective_full_perturbation(e_b, a, scale=0.5)
    assert np.array_equal(out, np.array([[1.0, 1.5], [0.0, 0.0]]))
    with pytest.raises(ShapeError):
        effective_full_perturbation(np.zeros((2, 2)), a, scale=1.0)


def test_apply_revert_restores_exact_objects():
    net = small_net(seed=61)
    originals_b = [layer.b for layer in net.layers]
    originals_a = [layer.a for layer in net.layers]
    rng = make_rng(62)
    e_b = [rng.standard_normal(layer.b.shape) for layer in net.layers]
    handle = apply_b_perturbation(net, e_b)
    for layer, orig, shift in zip(net.layers, originals_b, e_b):
        assert layer.b is not orig
        assert np.array_equal(layer.b, orig + shift)
    handle.revert()
    for layer, ob, oa in zip(net.layers, originals_b, originals_a):
        assert layer.b is ob  # the original array objects come back
        assert layer.a is oa


def test_revert_is_one_shot():
    net = small_net()
    handle = apply_b_perturbation(net, [np.ones_like(l.b) for l in net.layers])
    handle.revert()
    with pytest.raises(PerturbationStateError):
        handle.revert()


def test_perturbation_context_manager_reverts():
    net = small_net(seed=63)
    before = [layer.b.copy() for layer in net.layers]
    with apply_b_perturbation(net, [np.ones_like(l.b) for l in net.layers]):
        assert not np.array_equal(net.layers[0].b, before[0])
    for layer, saved in zip(net.layers, before):
        assert np.array_equal(layer.b, saved)

    # An exception inside the block still reverts.
    with pytest.raises(RuntimeError):
        with apply_b_perturbation(net, [np.ones_like(l.b) for l in net.layers]):
            raise RuntimeError("boom")
    for layer, saved in zip(net.layers, before):
        assert np.array_equal(layer.b, saved)


def test_apply_perturbation_both_factors_and_none_entries():
    net = small_net(seed=64)
    b0 = net.layers[0].b.copy()
    a1 = net.layers[1].a.copy()
    e_b = [np.ones_like(net.layers[0].b), None]
    e_a = [None, np.ones_like(net.layers[1].a)]
    with apply_perturbation(net, e_b=e_b, e_a=e_a):
        assert np.array_equal(net.layers[0].b, b0 + 1.0)
        assert np.array_equal(net.layers[1].a, a1 + 1.0)
    assert np.array_equal(net.layers[0].b, b0)
    assert np.array_equal(net.layers[1].a, a1)


def test_apply_perturbation_validation():
    net = small_net()
    with pytest.raises(ShapeError):
        apply_perturbation(net, e_b=[np.zeros((1, 1))])
    bad = [np.zeros((1, 1))] + [None] * (len(net.layers) - 1)
    with pytest.raises(ShapeError):
        apply_perturbation(net, e_b=bad)


def test_clone_network_is_independent():
    net = small_net(seed=71)
    twin = clone_network(net)
    twin.layers[0].b[0, 0] += 5.0
    twin.layers[0].w0[0, 0] += 5.0
    assert net.layers[0].b[0, 0] != twin.layers[0].b[0, 0]
    assert net.layers[0].w0[0, 0] != twin.layers[0].w0[0, 0]
    batch = random_batch(net, seed=71)
    _, l1 = forward(net, batch)
    fresh = clone_network(net)
    _, l2 = forward(fresh, batch)
    assert l1 == l2
