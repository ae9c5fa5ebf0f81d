"""Reverse-mode engine: primitives, tape semantics, optimizer, FD harness."""

import numpy as np
import pytest

import svpoint.autodiff as ad
from svpoint.errors import ParameterError, StateError
from svpoint.svcore import LinearParams


def weighted(op, seed=0):
    """Wrap an array-valued op into a scalar one with fixed random weights."""
    rng = np.random.default_rng(seed)
    cache = {}

    def scalar_op(*inputs):
        out = op(*inputs)
        if "w" not in cache:
            cache["w"] = ad.as_tensor(rng.standard_normal(out.data.shape))
        return (out * cache["w"]).sum()

    return scalar_op


# ---------------------------------------------------------------------------
# order-insensitive 3-sum


def test_sorted_coord_sum_permutation_invariant():
    rng = np.random.default_rng(0)
    for _ in range(300):
        triple = rng.standard_normal(3) * 10.0 ** rng.integers(-3, 4)
        base = ad.sorted_coord_sum(triple.reshape(3, 1))[0]
        for perm in ((0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)):
            assert ad.sorted_coord_sum(triple[list(perm)].reshape(3, 1))[0] == base


def test_sorted_coord_sum_correct_value():
    rng = np.random.default_rng(1)
    arr = rng.standard_normal((5, 3, 7))
    got = ad.sorted_coord_sum(arr, axis=1)
    assert np.abs(got - arr.sum(axis=1)).max() < 1e-12


def test_sorted_coord_sum_needs_length_three():
    with pytest.raises(ParameterError):
        ad.sorted_coord_sum(np.zeros((4, 2)))


# ---------------------------------------------------------------------------
# tape mechanics


def test_backward_linear_gradient():
    w = ad.parameter(np.zeros((3, 2)))
    x = ad.as_tensor(np.random.default_rng(2).standard_normal((3, 5)))
    with ad.Tape() as tape:
        loss = (ad.transpose(w) @ x).sum()
    tape.backward(loss)
    # d/dW of sum(W^T x) distributes each row sum of x across output columns
    expect = np.repeat(x.data.sum(axis=1)[:, None], 2, axis=1)
    assert np.abs(w.grad - expect).max() < 1e-12


def test_backward_fanout_accumulates():
    x = ad.parameter(np.array([3.0]))
    with ad.Tape() as tape:
        y = x + x
        loss = y.sum()
    tape.backward(loss)
    assert x.grad[0] == 2.0


def test_backward_requires_recording():
    with pytest.raises(StateError):
        ad.Tape().backward(ad.as_tensor(1.0))
    x = ad.parameter(np.ones(2))
    with ad.Tape() as tape:
        _ = x + 1.0
    loose = ad.as_tensor(np.ones(2)) + 0.0  # built outside any tape
    with pytest.raises(StateError):
        tape.backward(loose)


def test_no_tape_means_no_recording():
    x = ad.parameter(np.ones(3))
    y = (x * 2.0).sum()
    assert y._grad_fn is None and not y.requires_grad


def test_relu_zero_subgradient():
    x = ad.parameter(np.array([-1.0, 0.0, 2.0]))
    with ad.Tape() as tape:
        loss = ad.relu(x).sum()
    tape.backward(loss)
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


def test_sign_ste_band_exact():
    x = ad.parameter(np.arange(-2.0, 2.0001, 0.05))
    g = np.random.default_rng(3).standard_normal(x.data.shape)
    with ad.Tape() as tape:
        out = ad.sign_ste(x)
        loss = (out * ad.as_tensor(g)).sum()
    tape.backward(loss)
    expect = np.where((x.data > -1.2) & (x.data < 1.2), g, 0.0)
    assert np.array_equal(x.grad, expect)
    assert np.array_equal(out.data, np.where(x.data >= 0, 1.0, -1.0))


def test_sign_ste_outside_clip_blocks():
    x = ad.parameter(np.array([2.0]))
    with ad.Tape() as tape:
        loss = ad.sign_ste(x).sum()
    tape.backward(loss)
    assert x.grad[0] == 0.0


# ---------------------------------------------------------------------------
# finite differences on every smooth primitive


def rand_t(shape, seed):
    return ad.parameter(np.random.default_rng(seed).standard_normal(shape))


def test_fd_elementwise_ops():
    x = rand_t((4, 6), 10)
    y = rand_t((4, 6), 11)
    cases = [
        (lambda a, b: (a + b).sum(), [x, y], 1e-8),
        (lambda a, b: (a - b).sum(), [x, y], 1e-8),
        (lambda a, b: (a * b).sum(), [x, y], 1e-7),
        (lambda a, b: (a / (b * b + 1.0)).sum(), [x, y], 1e-6),
        (lambda a: ad.sigmoid(a).sum(), [rand_t((5,), 12)], 1e-6),
        (lambda a: ad.exp(a).sum(), [rand_t((5,), 13)], 1e-6),
        (lambda a: ad.sqrt(a * a + 1.0).sum(), [rand_t((5,), 14)], 1e-6),
        (lambda a: ad.relu(a + 0.3).sum(), [rand_t((6,), 15)], 1e-6),
    ]
    for i, (op, inputs, tol) in enumerate(cases):
        rel = ad.finite_difference_check(op, inputs)
        assert rel <= tol, f"case {i}: {rel}"


def test_fd_linear_is_tight():
    # linearity admits a much tighter bound than the smooth-op 1e-4
    w = rand_t((3, 4), 16)
    x = rand_t((3, 7), 17)
    rel = ad.finite_difference_check(lambda w, x: (ad.transpose(w) @ x).sum(), [w, x])
    assert rel <= 1e-9


def test_fd_structural_ops():
    x = rand_t((4, 6), 20)
    cases = [
        lambda a: ad.reshape(a, (2, 12)).sum(),
        lambda a: ad.concat([a, a * 2.0], axis=0).sum(),
        lambda a: ad.transpose(a).mean(),
        lambda a: (ad.tsum(a, axis=1) * ad.as_tensor(np.arange(4.0))).sum(),
        lambda a: (ad.tmean(a, axis=0) * ad.as_tensor(np.arange(6.0))).sum(),
    ]
    for i, op in enumerate(cases):
        rel = ad.finite_difference_check(op, [x])
        assert rel <= 1e-8, f"case {i}: {rel}"


def test_fd_pooling_ops():
    x = rand_t((3, 12), 21)
    w6 = ad.as_tensor(np.random.default_rng(22).standard_normal((3, 6)))
    w12 = ad.as_tensor(np.random.default_rng(23).standard_normal((3, 12)))
    rel = ad.finite_difference_check(lambda a: (ad.pool_groups(a, 2, "mean") * w6).sum(), [x])
    assert rel <= 1e-8
    rel = ad.finite_difference_check(lambda a: (ad.pool_groups(a, 2, "max") * w6).sum(), [x])
    assert rel <= 1e-6
    y = rand_t((3, 4), 24)
    rel = ad.finite_difference_check(lambda a: (ad.expand_groups(a, 3) * w12).sum(), [y])
    assert rel <= 1e-8
    idx = np.array([5, 0, 0, 7, 2, 11])
    wt = ad.as_tensor(np.random.default_rng(25).standard_normal((3, 6)))
    rel = ad.finite_difference_check(lambda a: (ad.take_sites(a, idx) * wt).sum(), [x])
    assert rel <= 1e-8


def test_fd_vector_feature_ops():
    v = rand_t((3, 4, 9), 30)
    w = rand_t((4, 5), 31)
    rel = ad.finite_difference_check(weighted(ad.vector_map_raw, 32), [v, w])
    assert rel <= 1e-7
    a = rand_t((3, 3, 9), 33)
    rel = ad.finite_difference_check(weighted(ad.pair_contract, 34), [a, v])
    assert rel <= 1e-7
    rel = ad.finite_difference_check(weighted(ad.vector_norms, 35), [v])
    assert rel <= 1e-6


def test_fd_fused_normalization():
    x = rand_t((5, 40), 40)
    gain = ad.parameter(np.random.default_rng(41).standard_normal(5) * 0.3 + 1.0)
    bias = ad.parameter(np.random.default_rng(42).standard_normal(5) * 0.2)
    rel = ad.finite_difference_check(
        weighted(lambda x, g, b: ad.batch_norm_train(x, g, b, 1e-5)[0], 43),
        [x, gain, bias],
    )
    assert rel <= 1e-6
    v = rand_t((3, 4, 30), 44)
    ls = ad.parameter(np.random.default_rng(45).standard_normal(4) * 0.1)
    rel = ad.finite_difference_check(
        weighted(lambda v, s: ad.vector_norm_scale_train(v, s, 1e-5)[0], 46),
        [v, ls],
    )
    assert rel <= 1e-6


def test_fd_mode_aware_linears():
    params = LinearParams(weight=ad.parameter(np.random.default_rng(50).standard_normal((4, 3))),
                          bias=ad.parameter(np.zeros(3)))
    x = rand_t((4, 8), 51)
    rel = ad.finite_difference_check(
        weighted(lambda x, *_: ad.scalar_linear(x, params), 52),
        [x, params.weight, params.bias],
    )
    assert rel <= 1e-7
    vparams = LinearParams(weight=ad.parameter(np.random.default_rng(53).standard_normal((4, 2))))
    v = rand_t((3, 4, 8), 54)
    rel = ad.finite_difference_check(
        weighted(lambda v, *_: ad.vector_linear(v, vparams), 55), [v, vparams.weight]
    )
    assert rel <= 1e-7


def test_fd_cross_entropy():
    logits = rand_t((4, 6), 60)
    labels = np.array([0, 1, 2, 3, 1, 2])
    rel = ad.finite_difference_check(lambda z: ad.cross_entropy_logits(z, labels), [logits])
    assert rel <= 1e-6


def test_cross_entropy_value():
    z = np.zeros((3, 2))
    loss = ad.cross_entropy_logits(ad.as_tensor(z), np.array([0, 2]))
    assert abs(loss.item() - np.log(3.0)) < 1e-12
    with pytest.raises(ParameterError):
        ad.cross_entropy_logits(ad.as_tensor(z), np.array([0, 1, 2]))


def test_vector_linear_rejects_binary_full():
    params = LinearParams(weight=np.ones((2, 2)), mode="binary_full",
                          beta=np.zeros(2), gamma=np.ones(2))
    with pytest.raises(ParameterError):
        ad.vector_linear(ad.as_tensor(np.ones((3, 2, 4))), params)


def test_pool_groups_validation():
    with pytest.raises(ParameterError):
        ad.pool_groups(ad.as_tensor(np.ones((2, 7))), 3, "mean")
    with pytest.raises(ParameterError):
        ad.pool_groups(ad.as_tensor(np.ones((2, 6))), 3, "median")


# ---------------------------------------------------------------------------
# optimizer


def make_store(value):
    store = ad.ParamStore()
    store.add("w", ad.parameter(np.array(value)))
    return store


def test_adam_zero_gradient_no_move():
    store = make_store([1.0, -2.0])
    ad.adam_step(store, grads={"w": np.zeros(2)}, lr=0.1)
    assert store.params["w"].data.tolist() == [1.0, -2.0]


def test_adam_constant_gradient_step_size():
    store = make_store([0.0])
    for _ in range(300):
        ad.adam_step(store, grads={"w": np.array([1.0])}, lr=0.01)
    # with a constant gradient the normalized update settles at lr
    delta = store.params["w"].data[0]
    assert abs(delta + 300 * 0.01) < 0.05


def test_adam_matches_hand_recursion():
    store = make_store([0.5])
    grads = [0.3, -0.2, 0.7]
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    m = v = 0.0
    w = 0.5
    for t, g in enumerate(grads, 1):
        ad.adam_step(store, grads={"w": np.array([g])}, lr=lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        assert abs(store.params["w"].data[0] - w) < 1e-12


def test_adam_uses_tape_grads_and_checks_shapes():
    store = make_store([1.0])
    with ad.Tape() as tape:
        loss = (store.params["w"] * 3.0).sum()
    tape.backward(loss)
    ad.adam_step(store, lr=0.1)
    assert store.params["w"].data[0] != 1.0
    with pytest.raises(ParameterError):
        ad.adam_step(store, grads={"w": np.zeros(5)}, lr=0.1)


def test_param_store_unique_names():
    store = make_store([0.0])
    with pytest.raises(ParameterError):
        store.add("w", ad.parameter(np.zeros(1)))
    store.reset_optimizer()
    assert store.step_count == 0 and not store.moment1


# ---------------------------------------------------------------------------
# schedules


def test_lr_schedule_cosine_endpoints():
    assert ad.lr_schedule("cosine", 0, 60, 1e-3) == 1e-3
    assert ad.lr_schedule("cosine", 60, 60, 1e-3) == 0.0
    mid = ad.lr_schedule("cosine", 30, 60, 1e-3)
    assert abs(mid - 5e-4) < 1e-18


def test_lr_schedule_multistep():
    got = ad.lr_schedule("multistep", 40, 100, 0.001)
    assert abs(got - 0.00049) < 1e-15
    assert ad.lr_schedule("multistep", 19, 100, 0.001) == 0.001


def test_lr_schedule_validation():
    with pytest.raises(ParameterError):
        ad.lr_schedule("cosine", 61, 60, 1e-3)
    with pytest.raises(ParameterError):
        ad.lr_schedule("linear", 0, 60, 1e-3)


# ---------------------------------------------------------------------------
# determinism


def test_training_deterministic_bitwise():
    def run():
        rng = np.random.default_rng(7)
        store = ad.ParamStore()
        w = store.add("w", ad.parameter(rng.standard_normal((4, 3))))
        b = store.add("b", ad.parameter(np.zeros(3)))
        x = ad.as_tensor(rng.standard_normal((4, 10)))
        labels = rng.integers(0, 3, 10)
        losses = []
        for _ in range(5):
            store.zero_grad()
            with ad.Tape() as tape:
                z = ad.add(ad.transpose(w) @ x, ad.reshape(b, (3, 1)))
                loss = ad.cross_entropy_logits(z, labels)
            tape.backward(loss)
            ad.adam_step(store, lr=1e-2)
            losses.append(loss.item())
        return losses

    assert run() == run()
