"""Optimizer-level identities: gradient reconstruction against projector
oracles, perturbation transfer, update semantics, the EMA state machine,
and memory accounting."""

import math

import numpy as np
import pytest

from flatlora.linalg import make_rng, row_space_projector, col_space_projector
from flatlora.model import Batch, backward, build_network, clone_network, forward
from flatlora.optimizers import (
    OPTIMIZER_KINDS,
    BaseUpdateConfig,
    OptimizerStateError,
    PerturbState,
    base_update,
    eflat_lora_step,
    flat_lora_step,
    full_to_lowrank_perturbation,
    init_perturb_state,
    init_sgd_state,
    lora_sam_step,
    lora_step,
    param_and_memory_counts,
    perturbation_from_gradients,
    perturbation_from_rho,
    reconstruct_full_gradient,
    rho_at,
    sam_direction,
)

RECON_TOL = 1e-9


def make_net(seed=0, dims=(6, 5, 3), rank=2, scale=1.0, nonzero_b=True):
    rng = make_rng(seed)
    net = build_network(list(dims), rank=rank, scale=scale, rng=rng)
    if nonzero_b:
        for layer in net.layers:
            layer.b = rng.standard_normal(layer.b.shape) * 0.4
    return net


def make_batch(net, seed=0, k=9):
    rng = make_rng([seed, 7])
    return Batch(
        inputs=rng.standard_normal((net.in_dim, k)),
        targets=rng.standard_normal((net.out_dim, k)),
    )


# ------------------------------------------------------------------ schedule

def test_rho_at_values_and_validation():
    assert rho_at(0.5, 1, "constant") == 0.5
    assert rho_at(0.5, 100, "constant") == 0.5
    assert abs(rho_at(0.5, 4, "inverse-sqrt") - 0.25) < 1e-15
    assert rho_at(0.5, 1, "inverse-sqrt") == 0.5
    with pytest.raises(ValueError):
        rho_at(0.5, 0)
    with pytest.raises(ValueError):
        rho_at(-0.1, 1)
    with pytest.raises(ValueError):
        rho_at(0.5, 1, "linear")


# ----------------------------------------------------------------- direction

def test_sam_direction_norm_and_alignment():
    rng = make_rng(1)
    g = rng.standard_normal((4, 6))
    d, degenerate = sam_direction(g, rho=0.3)
    assert not degenerate
    assert abs(np.linalg.norm(d) - 0.3) < 1e-12
    # Parallel to g: cross terms vanish.
    cos = float(np.sum(d * g)) / (np.linalg.norm(d) * np.linalg.norm(g))
    assert abs(cos - 1.0) < 1e-12


def test_sam_direction_signed_variant():
    g = np.array([[3.0, -4.0]])
    d, degenerate = sam_direction(g, rho=1.0, variant="signed")
    assert not degenerate
    # |g| / ||g|| = (3, 4) / 5
    assert np.max(np.abs(d - np.array([[0.6, 0.8]]))) < 1e-15
    assert abs(np.linalg.norm(d) - 1.0) < 1e-15


def test_sam_direction_degenerate_and_zero_rho():
    d, degenerate = sam_direction(np.zeros((3, 3)), rho=0.5)
    assert degenerate and np.array_equal(d, np.zeros((3, 3)))
    g = np.ones((2, 2))
    d, degenerate = sam_direction(g, rho=0.0)
    assert not degenerate and np.array_equal(d, np.zeros((2, 2)))
    with pytest.raises(ValueError):
        sam_direction(g, 0.1, variant="absolute")


# ------------------------------------------------------------- reconstruction

def synthetic_factor_grads(rng, n, m, r, scale):
    """A dense gradient and the exact factor gradients it induces."""
    a = rng.standard_normal((r, m))
    b = rng.standard_normal((n, r))
    g = rng.standard_normal((n, m))
    return g, scale * (g @ a.T), scale * (b.T @ g), a, b


def test_reconstruction_equals_projected_average():
    """With exact chain-rule factor gradients the reconstruction equals
    0.5 * (G @ P_A + P_B @ G)."""
    rng = make_rng(2)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 9))
        m = int(rng.integers(2, 9))
        r = int(rng.integers(1, min(n, m) + 1))
        scale = float(rng.uniform(0.25, 4.0))
        g, gb, ga, a, b = synthetic_factor_grads(rng, n, m, r, scale)
        got = reconstruct_full_gradient(gb, ga, a, b, scale)
        want = 0.5 * (g @ row_space_projector(a) + col_space_projector(b) @ g)
        worst = max(worst, np.max(np.abs(got - want)))
    assert worst < RECON_TOL


def test_reconstruction_recovers_dense_gradient_at_full_rank():
    """Square full-rank factors make both projectors the identity, so the
    reconstruction returns the dense gradient itself."""
    rng = make_rng(3)
    for _ in range(20):
        n = int(rng.integers(2, 7))
        g, gb, ga, a, b = synthetic_factor_grads(rng, n, n, n, 1.5)
        got = reconstruct_full_gradient(gb, ga, a, b, 1.5)
        assert np.max(np.abs(got - g)) < RECON_TOL


def test_transfer_merged_effect_is_row_space_projection():
    """scale * e_b @ a equals e_w_bar projected onto the row space of a."""
    rng = make_rng(4)
    for _ in range(30):
        n = int(rng.integers(2, 8))
        m = int(rng.integers(2, 8))
        r = int(rng.integers(1, min(n, m) + 1))
        scale = float(rng.uniform(0.5, 2.0))
        a = rng.standard_normal((r, m))
        e_w_bar = rng.standard_normal((n, m))
        e_b = full_to_lowrank_perturbation(e_w_bar, a, scale)
        merged = scale * (e_b @ a)
        want = e_w_bar @ row_space_projector(a)
        assert np.max(np.abs(merged - want)) < RECON_TOL


def test_plan_matches_composed_reference_route():
    """The fused per-step kernel agrees with the readable composition of
    reconstruct, normalise, transfer."""
    net = make_net(seed=5)
    batch = make_batch(net, seed=5)
    grads = backward(net, batch)
    rho = 0.2
    plan = perturbation_from_gradients(net, grads, rho)
    for i, layer in enumerate(net.layers):
        g_bar = reconstruct_full_gradient(
            grads.grad_b[i], grads.grad_a[i], layer.a, layer.b, layer.scale
        )
        direction, degenerate = sam_direction(g_bar, rho)
        assert not degenerate
        e_b = full_to_lowrank_perturbation(direction, layer.a, layer.scale)
        assert np.max(np.abs(plan.e_w_bar[i] - direction)) < 1e-12
        assert np.max(np.abs(plan.e_b[i] - e_b)) < 1e-12
    assert plan.degenerate_layers == ()


def test_plan_normalizes_each_layer_to_rho():
    net = make_net(seed=6, dims=(7, 6, 5, 2), rank=2)
    batch = make_batch(net, seed=6)
    rho = 0.37
    plan = perturbation_from_rho(net, batch, rho)
    for e in plan.e_w_bar:
        assert abs(np.linalg.norm(e) - rho) < 1e-10


def test_plan_flags_degenerate_layers_at_exact_minimum():
    """Targets equal to predictions zero the loss gradient, so every
    layer's reconstructed direction degenerates to zero."""
    net = make_net(seed=7)
    rng = make_rng(8)
    inputs = rng.standard_normal((net.in_dim, 5))
    preds, _ = forward(net, Batch(inputs=inputs, targets=np.zeros((net.out_dim, 5))))
    batch = Batch(inputs=inputs, targets=preds)
    plan = perturbation_from_rho(net, batch, rho=0.5)
    assert plan.degenerate_layers == tuple(range(len(net.layers)))
    for e_w, e_b in zip(plan.e_w_bar, plan.e_b):
        assert np.array_equal(e_w, np.zeros_like(e_w))
        assert np.array_equal(e_b, np.zeros_like(e_b))
    assert plan.total_norm() == 0.0


def test_plan_handles_zero_b_factor_at_init():
    """Fresh networks have b = 0; the rank-deficient side must fall back
    cleanly instead of blowing up."""
    net = make_net(seed=9, nonzero_b=False)
    batch = make_batch(net, seed=9)
    plan = perturbation_from_rho(net, batch, rho=0.1)
    for e_w, e_b in zip(plan.e_w_bar, plan.e_b):
        assert np.all(np.isfinite(e_w))
        assert np.all(np.isfinite(e_b))
        assert abs(np.linalg.norm(e_w) - 0.1) < 1e-10


# ------------------------------------------------------------------- updates

def test_base_update_plain_sgd():
    net = make_net(seed=10)
    batch = make_batch(net, seed=10)
    grads = backward(net, batch)
    expect_b = [l.b - 0.1 * gb for l, gb in zip(net.layers, grads.grad_b)]
    expect_a = [l.a - 0.1 * ga for l, ga in zip(net.layers, grads.grad_a)]
    base_update(net, grads, BaseUpdateConfig(learning_rate=0.1), init_sgd_state(net))
    for layer, eb, ea in zip(net.layers, expect_b, expect_a):
        assert np.max(np.abs(layer.b - eb)) < 1e-15
        assert np.max(np.abs(layer.a - ea)) < 1e-15


def test_base_update_momentum_and_weight_decay():
    """Two steps against a hand-rolled velocity recurrence."""
    net = make_net(seed=11)
    batch = make_batch(net, seed=11)
    cfg = BaseUpdateConfig(learning_rate=0.05, momentum=0.9, weight_decay=0.01)
    state = init_sgd_state(net)

    mirror = clone_network(net)
    vel_b = [np.zeros_like(l.b) for l in mirror.layers]
    vel_a = [np.zeros_like(l.a) for l in mirror.layers]
    for _ in range(2):
        grads = backward(net, batch)
        mirror_grads = backward(mirror, batch)
        base_update(net, grads, cfg, state)
        for i, layer in enumerate(mirror.layers):
            vel_b[i] = 0.9 * vel_b[i] + mirror_grads.grad_b[i] + 0.01 * layer.b
            layer.b = layer.b - 0.05 * vel_b[i]
            vel_a[i] = 0.9 * vel_a[i] + mirror_grads.grad_a[i] + 0.01 * layer.a
            layer.a = layer.a - 0.05 * vel_a[i]
    for got, want in zip(net.layers, mirror.layers):
        assert np.max(np.abs(got.b - want.b)) < 1e-13
        assert np.max(np.abs(got.a - want.a)) < 1e-13


def test_base_update_config_validation():
    with pytest.raises(ValueError):
        BaseUpdateConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        BaseUpdateConfig(learning_rate=0.1, momentum=1.0)
    with pytest.raises(ValueError):
        BaseUpdateConfig(learning_rate=0.1, weight_decay=-0.1)


def test_base_update_rejects_mismatched_gradients():
    net = make_net()
    grads = backward(net, make_batch(net))
    grads.grad_b.append(np.zeros((1, 1)))
    with pytest.raises(ValueError):
        base_update(net, grads, BaseUpdateConfig(learning_rate=0.1),
                    init_sgd_state(net))


# --------------------------------------------------------------------- steps

def test_step_gradient_eval_counts():
    cfg = BaseUpdateConfig(learning_rate=0.02)
    net = make_net(seed=12)
    batch = make_batch(net, seed=12)
    assert lora_step(net, batch, cfg, init_sgd_state(net)).grad_evals == 1
    assert lora_sam_step(net, batch, 0.05, cfg, init_sgd_state(net)).grad_evals == 2
    assert flat_lora_step(net, batch, 0.05, cfg, init_sgd_state(net)).grad_evals == 2
    pstate = init_perturb_state(net, rho0=0.05, beta=0.9)
    assert eflat_lora_step(net, batch, pstate, cfg, init_sgd_state(net)).grad_evals == 1


def test_lora_step_descends_on_fixed_batch():
    net = make_net(seed=13)
    batch = make_batch(net, seed=13)
    cfg = BaseUpdateConfig(learning_rate=0.05)
    state = init_sgd_state(net)
    _, before = forward(net, batch)
    for _ in range(50):
        lora_step(net, batch, cfg, state)
    _, after = forward(net, batch)
    assert after < before


def test_two_pass_steps_revert_perturbation_before_update():
    """After a flat step, parameters equal start minus lr times the
    perturbed-point gradient; no perturbation residue remains."""
    net = make_net(seed=14)
    batch = make_batch(net, seed=14)
    twin = clone_network(net)
    cfg = BaseUpdateConfig(learning_rate=0.03)

    stats = flat_lora_step(net, batch, 0.1, cfg, init_sgd_state(net))
    assert stats.perturb_norm > 0.0
    assert math.isfinite(stats.loss_original) and math.isfinite(stats.loss_perturbed)

    from flatlora.model import apply_b_perturbation
    plan = perturbation_from_rho(twin, batch, 0.1)
    handle = apply_b_perturbation(twin, plan.e_b)
    perturbed_grads = backward(twin, batch)
    handle.revert()
    for layer, gb, ga in zip(twin.layers, perturbed_grads.grad_b,
                             perturbed_grads.grad_a):
        layer.b = layer.b - 0.03 * gb
        layer.a = layer.a - 0.03 * ga
    for got, want in zip(net.layers, twin.layers):
        assert np.max(np.abs(got.b - want.b)) == 0.0
        assert np.max(np.abs(got.a - want.a)) == 0.0


def test_zero_rho_two_pass_steps_match_plain_lora():
    """rho = 0 collapses every sharpness-aware variant onto plain training,
    trajectory-exact."""
    cfg = BaseUpdateConfig(learning_rate=0.04)
    batches = [make_batch(make_net(seed=15), seed=s) for s in range(5)]

    plain = make_net(seed=15)
    state_p = init_sgd_state(plain)
    flat = make_net(seed=15)
    state_f = init_sgd_state(flat)
    sam = make_net(seed=15)
    state_s = init_sgd_state(sam)
    for batch in batches:
        lora_step(plain, batch, cfg, state_p)
        flat_lora_step(flat, batch, 0.0, cfg, state_f)
        lora_sam_step(sam, batch, 0.0, cfg, state_s)
    for p, f, s in zip(plain.layers, flat.layers, sam.layers):
        assert np.array_equal(p.b, f.b) and np.array_equal(p.a, f.a)
        assert np.array_equal(p.b, s.b) and np.array_equal(p.a, s.a)


def test_eflat_zero_rho_matches_plain_lora():
    cfg = BaseUpdateConfig(learning_rate=0.04)
    plain = make_net(seed=16)
    ema = make_net(seed=16)
    state_p = init_sgd_state(plain)
    state_e = init_sgd_state(ema)
    pstate = init_perturb_state(ema, rho0=0.0, beta=0.9)
    for s in range(5):
        batch = make_batch(plain, seed=s)
        lora_step(plain, batch, cfg, state_p)
        eflat_lora_step(ema, batch, pstate, cfg, state_e)
    pstate.remove(ema)
    for p, e in zip(plain.layers, ema.layers):
        assert np.array_equal(p.b, e.b) and np.array_equal(p.a, e.a)


# ----------------------------------------------------------------- EMA state

def test_eflat_leaves_network_perturbed_between_steps():
    net = make_net(seed=17)
    batch = make_batch(net, seed=17)
    cfg = BaseUpdateConfig(learning_rate=0.02)
    state = init_sgd_state(net)
    pstate = init_perturb_state(net, rho0=0.1, beta=0.9)

    stats1 = eflat_lora_step(net, batch, pstate, cfg, state)
    assert pstate.applied and pstate.step_index == 1
    assert math.isfinite(stats1.loss_original) and math.isnan(stats1.loss_perturbed)

    stats2 = eflat_lora_step(net, batch, pstate, cfg, state)
    assert math.isnan(stats2.loss_original) and math.isfinite(stats2.loss_perturbed)

    # remove() strips exactly the EMA perturbation.
    perturbed = [layer.b.copy() for layer in net.layers]
    pstate.remove(net)
    for layer, pb, e in zip(net.layers, perturbed, pstate.ema_e_b):
        assert np.max(np.abs(pb - (layer.b + e))) < 1e-15
    pstate.apply(net)


def test_perturb_state_misuse_errors():
    net = make_net(seed=18)
    pstate = init_perturb_state(net, rho0=0.1, beta=0.9)
    with pytest.raises(OptimizerStateError):
        pstate.remove(net)
    pstate.apply(net)
    with pytest.raises(OptimizerStateError):
        pstate.apply(net)
    pstate.remove(net)

    # A state claiming to be mid-run but unapplied is rejected by the step.
    stale = init_perturb_state(net, rho0=0.1, beta=0.9)
    stale.step_index = 3
    with pytest.raises(OptimizerStateError):
        eflat_lora_step(net, make_batch(net, seed=18), stale,
                        BaseUpdateConfig(learning_rate=0.01), init_sgd_state(net))


def test_perturb_state_validation():
    net = make_net()
    with pytest.raises(ValueError):
        init_perturb_state(net, rho0=0.1, beta=0.0)
    with pytest.raises(ValueError):
        init_perturb_state(net, rho0=0.1, beta=1.5)
    with pytest.raises(ValueError):
        init_perturb_state(net, rho0=-0.1, beta=0.9)


def test_ema_matches_closed_form_sum():
    """After T steps the EMA equals sum_k beta * (1-beta)^(T-k) * e_k with
    e_k the recorded per-step perturbations."""
    net = make_net(seed=19)
    cfg = BaseUpdateConfig(learning_rate=0.02)
    state = init_sgd_state(net)
    beta = 0.7
    pstate = init_perturb_state(net, rho0=0.15, beta=beta)
    recorded = []
    T = 6
    for s in range(T):
        eflat_lora_step(net, make_batch(net, seed=s), pstate, cfg, state)
        recorded.append([e.copy() for e in pstate.last_e_b])
    for i in range(len(net.layers)):
        closed = np.zeros_like(pstate.ema_e_b[i])
        for k, e_list in enumerate(recorded, start=1):
            closed += beta * (1.0 - beta) ** (T - k) * e_list[i]
        assert np.max(np.abs(pstate.ema_e_b[i] - closed)) < 1e-10


def test_ema_beta_one_keeps_only_latest():
    net = make_net(seed=20)
    cfg = BaseUpdateConfig(learning_rate=0.02)
    state = init_sgd_state(net)
    pstate = init_perturb_state(net, rho0=0.15, beta=1.0)
    for s in range(4):
        eflat_lora_step(net, make_batch(net, seed=s), pstate, cfg, state)
    for ema, last in zip(pstate.ema_e_b, pstate.last_e_b):
        assert np.max(np.abs(ema - last)) < 1e-15


# -------------------------------------------------------------------- memory

def test_memory_counts_formula():
    rng = make_rng(21)
    for _ in range(10):
        depth = int(rng.integers(2, 5))
        dims = [int(rng.integers(2, 10)) for _ in range(depth)]
        rank = int(rng.integers(1, min(dims) + 1))
        net = build_network(dims, rank=rank, scale=1.0, rng=rng)
        trainable = sum(n * rank + rank * m for m, n in zip(dims, dims[1:]))
        frozen = sum(n * m for m, n in zip(dims, dims[1:]))
        for kind, mult in (("lora", 0.0), ("lora-sam", 1.0),
                           ("flat-lora", 1.5), ("eflat-lora", 2.0)):
            counts = param_and_memory_counts(net, kind)
            assert counts.trainable == trainable
            assert counts.frozen == frozen
            assert counts.extra == mult * trainable
            assert counts.kind == kind


def test_memory_counts_unknown_kind():
    net = make_net()
    with pytest.raises(ValueError):
        param_and_memory_counts(net, "adamw")
    assert set(OPTIMIZER_KINDS) == {"lora", "lora-sam", "flat-lora", "eflat-lora"}
