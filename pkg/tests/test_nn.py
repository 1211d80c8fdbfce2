import itertools

import numpy as np
import pytest

from peddpg.nn import (
    Adam,
    CheckpointError,
    Dense,
    Network,
    PEDense,
    PIDense,
    ReLU,
    ScaledTanh,
    Squeeze,
    build_actor,
    build_critic,
    closed_form_counts,
    count_free_params,
    load_checkpoint,
    save_checkpoint,
    soft_update,
)
from peddpg.nn.layers import Flatten


def _perms(k, n_random=100, seed=0):
    if k <= 4:
        return [np.array(p) for p in itertools.permutations(range(k))]
    rng = np.random.default_rng(seed)
    return [rng.permutation(k) for _ in range(n_random)]


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


# -- symmetry -------------------------------------------------------------------


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5, 10])
@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-6), (np.float64, 1e-12)])
def test_pe_actor_is_equivariant(k, dtype, tol):
    rng = np.random.default_rng(k)
    actor = build_actor("pe", k, 10, 8 * k, 2, rng=rng, dtype=dtype)
    # larger output init so the test exercises a non-trivial map
    actor.layers[-3].params["U"] = rng.normal(size=actor.layers[-3].params["U"].shape).astype(dtype)
    s = rng.normal(size=(4, k, 10)).astype(dtype)
    y = actor(s)
    for p in _perms(k):
        assert _rel(actor(s[:, p]), y[:, p]) <= tol


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5, 10])
@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-6), (np.float64, 1e-12)])
def test_pi_critic_is_invariant(k, dtype, tol):
    rng = np.random.default_rng(100 + k)
    critic = build_critic("pe", k, 10, 8 * k, 2, rng=rng, dtype=dtype)
    x = rng.normal(size=(4, k, 11)).astype(dtype)
    q = critic(x)
    for p in _perms(k):
        assert _rel(critic(x[:, p]), q) <= tol


def test_fc_actor_is_not_equivariant():
    rng = np.random.default_rng(0)
    actor = build_actor("fc", 3, 4, 12, 1, rng=rng, dtype=np.float64)
    actor.layers[-2].params["W"] = rng.normal(size=actor.layers[-2].params["W"].shape)
    s = rng.normal(size=(1, 3, 4))
    p = np.array([1, 2, 0])
    assert _rel(actor(s[:, p]), actor(s)[:, p]) > 1e-6


def test_tied_blocks_collapse_rows():
    rng = np.random.default_rng(3)
    net = build_actor("pe", 4, 5, 12, 2, rng=rng, dtype=np.float64)
    for layer in net.layers:
        if isinstance(layer, PEDense):
            layer.params["V"] = layer.params["U"].copy()
    row = rng.normal(size=5)
    s = np.tile(row, (1, 4, 1))
    y = net(s)
    assert np.allclose(y, y[:, :1], rtol=0, atol=1e-15)


# -- gradients ---------------------------------------------------------------


def _fd_check(net, x, seed=0, h=1e-5):
    rng = np.random.default_rng(seed)
    y = net(x)
    w = rng.normal(size=y.shape)
    net.backward(w)
    analytic = [g.copy() for g in net.grads]
    # entries whose true gradient is exactly zero are compared on the overall scale
    floor = 1e-6 * max(1.0, max(float(np.max(np.abs(g))) for g in analytic))
    worst = 0.0
    for p, g in zip(net.params, analytic):
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            fp = np.sum(w * net(x))
            p[i] = old - h
            fm = np.sum(w * net(x))
            p[i] = old
            num = (fp - fm) / (2 * h)
            denom = max(abs(num), abs(g[i]), floor)
            worst = max(worst, abs(num - g[i]) / denom)
    # input gradient too
    net(x)
    dx = net.backward(w)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = np.sum(w * net(x))
        x[i] = old - h
        fm = np.sum(w * net(x))
        x[i] = old
        num = (fp - fm) / (2 * h)
        worst = max(worst, abs(num - dx[i]) / max(abs(num), abs(dx[i]), floor))
    return worst


def _three_layer(kind, act, k=3, d_in=4, width=6, seed=0):
    rng = np.random.default_rng(seed)
    f64 = np.float64
    if kind == "fc":
        layers = [Flatten(), Dense(k * d_in, width, rng, f64), act(), Dense(width, width, rng, f64), act(),
                  Dense(width, 2, rng, f64, init_scale=1.0)]
    elif kind == "pe":
        layers = [PEDense(k, d_in, width, rng, f64), act(), PEDense(k, width, width, rng, f64), act(),
                  PEDense(k, width, 1, rng, f64, init_scale=1.0), Squeeze()]
    else:
        layers = [PEDense(k, d_in, width, rng, f64), act(), PEDense(k, width, width, rng, f64), act(),
                  PIDense(k, width, 1, rng, f64, init_scale=1.0), Squeeze()]
    return Network(layers, f64)


@pytest.mark.parametrize("kind", ["fc", "pe", "pi"])
@pytest.mark.parametrize("act", [ReLU, ScaledTanh])
def test_gradients_match_finite_differences(kind, act):
    net = _three_layer(kind, act)
    x = np.random.default_rng(1).normal(size=(5, 3, 4))
    assert _fd_check(net, x) < 1e-4


@pytest.mark.parametrize("arch", ["fc", "pe"])
def test_built_networks_pass_gradient_check(arch):
    rng = np.random.default_rng(2)
    actor = build_actor(arch, 2, 4, 6, 1, rng=rng, dtype=np.float64)
    critic = build_critic(arch, 2, 4, 6, 1, rng=rng, dtype=np.float64)
    assert _fd_check(actor, rng.normal(size=(3, 2, 4))) < 1e-4
    assert _fd_check(critic, rng.normal(size=(3, 2, 5))) < 1e-4


def test_tanh_activity_penalty_gradient():
    # gradient of sum(w * y) + c/2 * sum(x**2) with respect to the squash input x
    layer, c = ScaledTanh(), 0.3
    x = np.random.default_rng(4).normal(size=(4, 3)) * 3
    w = np.random.default_rng(5).normal(size=x.shape)
    layer.forward(x)
    layer.activity_l2 = c
    got = layer.backward(w)
    h, num = 1e-6, np.zeros_like(x)
    loss = lambda z: np.sum(w * 0.5 * (np.tanh(z) + 1)) + 0.5 * c * np.sum(z**2)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        num[i] = (loss(x + e) - loss(x - e)) / (2 * h)
    assert np.allclose(got, num, rtol=1e-6, atol=1e-8)
    layer.activity_l2 = 0.0
    assert np.allclose(layer.backward(w), w * (1 - np.tanh(x) ** 2) / 2)


def test_zero_upstream_gradient():
    net = _three_layer("pi", ReLU)
    x = np.random.default_rng(0).normal(size=(2, 3, 4))
    net(x)
    dx = net.backward(np.zeros(2))
    assert not np.any(dx)
    assert all(not np.any(g) for g in net.grads)


def test_single_block_pe_matches_dense():
    rng = np.random.default_rng(4)
    pe = PEDense(1, 5, 3, rng, np.float64)
    dense = Dense(5, 3, dtype=np.float64)
    dense.params["W"] = pe.params["U"].copy()
    dense.params["b"] = pe.params["P"].copy()
    x = rng.normal(size=(7, 1, 5))
    dy = rng.normal(size=(7, 1, 3))
    assert np.allclose(pe.forward(x)[:, 0], dense.forward(x[:, 0]), rtol=1e-14)
    dx_pe = pe.backward(dy)
    dx_dense = dense.backward(dy[:, 0])
    assert np.allclose(pe.grads["U"], dense.grads["W"], rtol=1e-14)
    assert np.allclose(pe.grads["P"], dense.grads["b"], rtol=1e-14)
    assert np.allclose(pe.grads["V"], 0.0, atol=1e-14)
    assert np.allclose(dx_pe[:, 0], dx_dense, rtol=1e-14)


@pytest.mark.parametrize("layer_cls", [PEDense, PIDense])
def test_materialized_weights_reproduce_shared_path(layer_cls):
    rng = np.random.default_rng(6)
    n, d_in, d_out, batch = 4, 3, 2, 5
    layer = layer_cls(n, d_in, d_out, rng, np.float64)
    x = rng.normal(size=(batch, n, d_in))
    y = layer.forward(x)
    W, b = layer.materialize()
    dense_y = x.reshape(batch, -1) @ W.T + b
    assert np.allclose(y.reshape(batch, -1), dense_y, rtol=1e-13)

    dy = rng.normal(size=y.shape)
    dx = layer.backward(dy)
    dW = dy.reshape(batch, -1).T @ x.reshape(batch, -1)
    assert np.allclose(dx.reshape(batch, -1), dy.reshape(batch, -1) @ W, rtol=1e-13)
    blocks = dW.reshape(-1, d_out, n, d_in).transpose(0, 2, 1, 3)  # (row block, col block, out, in)
    if layer_cls is PEDense:
        diag = sum(blocks[i, i] for i in range(n))
        off = sum(blocks[i, j] for i in range(n) for j in range(n) if i != j)
        assert np.allclose(layer.grads["U"], diag, rtol=1e-12)
        assert np.allclose(layer.grads["V"], off, rtol=1e-12)
    else:
        assert np.allclose(layer.grads["A"], sum(blocks[0, j] for j in range(n)), rtol=1e-12)


def test_backward_before_forward_is_an_error():
    with pytest.raises(RuntimeError):
        PEDense(2, 3, 4).backward(np.zeros((1, 2, 4)))


def test_shape_mismatch_is_an_error():
    with pytest.raises(ValueError):
        PEDense(2, 3, 4).forward(np.zeros((1, 3, 3)))
    with pytest.raises(ValueError):
        Dense(3, 4).forward(np.zeros((1, 5)))


# -- Adam ----------------------------------------------------------------------


def _scalar_net(value=1.0):
    layer = Dense(1, 1, dtype=np.float64)
    layer.params["W"][:] = value
    layer.params["b"][:] = value
    return Network([layer], np.float64)


def test_adam_zero_gradient_leaves_params():
    net = _scalar_net()
    opt = Adam(net, lr=1e-3)
    opt.step([np.zeros((1, 1)), np.zeros(1)])
    assert net.params[0][0, 0] == 1.0 and net.params[1][0] == 1.0


def test_adam_first_step_is_learning_rate():
    net = _scalar_net()
    opt = Adam(net, lr=1e-3)
    opt.step([np.ones((1, 1)), np.ones(1)])
    assert net.params[0][0, 0] - 1.0 == pytest.approx(-1e-3, rel=1e-6)


def test_adam_weight_decay_shrinks_magnitude():
    net = _scalar_net(-0.7)
    opt = Adam(net, lr=1e-3, weight_decay=1e-4)
    before = np.abs(net.params[0]).copy()
    opt.step([np.zeros((1, 1)), np.zeros(1)])
    assert np.all(np.abs(net.params[0]) < before)


# -- counting -------------------------------------------------------------------


@pytest.mark.parametrize("k,expected", [(2, 5_814_000), (5, 5_893_200), (10, 6_025_200)])
def test_fc_counts_match_published_table(k, expected):
    assert count_free_params("fc", k, 10, 600, 4) == expected


@pytest.mark.parametrize("k", [1, 2, 3, 5, 10])
def test_enumeration_matches_closed_form(k):
    fc, pe = closed_form_counts(k, 10, 600, 4)
    assert count_free_params("fc", k, 10, 600, 4) == fc
    assert count_free_params("pe", k, 10, 600, 4) == pe


def test_counts_without_targets_and_with_biases():
    k, D, d, L = 5, 10, 600, 4
    assert count_free_params("pe", k, D, d, L, include_targets=False) * 2 == count_free_params("pe", k, D, d, L)
    # biases: PE layers carry d/K per hidden layer plus one output scalar per net
    with_b = count_free_params("pe", k, D, d, L, weights_only=False, include_targets=False)
    weights = count_free_params("pe", k, D, d, L, include_targets=False)
    assert with_b - weights == 2 * (L + 1) * (d // k) + 1 + 1


@pytest.mark.parametrize("k", [2, 5, 10])
def test_compression_ratio_near_two_over_k_squared(k):
    ratio = count_free_params("pe", k, 10, 600, 4) / count_free_params("fc", k, 10, 600, 4)
    assert abs(ratio - 2 / k**2) <= 0.05 * 2 / k**2


def test_ratio_tends_to_two_over_k_squared_with_width():
    k = 5
    gaps = [
        abs(count_free_params("pe", k, 10, d, 4) / count_free_params("fc", k, 10, d, 4) - 2 / k**2)
        for d in (100, 1000, 10000)
    ]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-3 * 2 / k**2


def test_count_is_enumeration_of_allocated_arrays():
    rng = np.random.default_rng(0)
    actor = build_actor("pe", 3, 7, 9, 2, rng=rng)
    assert actor.count(weights_only=False) == sum(p.size for p in actor.params)


def test_indivisible_width_is_rejected():
    with pytest.raises(ValueError, match="divisible"):
        build_actor("pe", 7, 10, 600, 4)


# -- soft updates and checkpoints ---------------------------------------------


def test_soft_update_extremes_and_contraction():
    rng = np.random.default_rng(0)
    main = build_critic("pe", 2, 3, 4, 1, rng=rng, dtype=np.float64)
    target = build_critic("pe", 2, 3, 4, 1, rng=np.random.default_rng(1), dtype=np.float64)
    frozen = [p.copy() for p in target.params]
    soft_update(target, main, 0.0)
    assert all(np.array_equal(a, b) for a, b in zip(target.params, frozen))

    gap0 = [t - m for t, m in zip(target.params, main.params)]
    omega, n = 0.05, 20
    for _ in range(n):
        soft_update(target, main, omega)
    for t, m, g in zip(target.params, main.params, gap0):
        assert np.allclose(t - m, (1 - omega) ** n * g, rtol=0, atol=1e-9)

    soft_update(target, main, 1.0)
    assert all(np.array_equal(a, b) for a, b in zip(target.params, main.params))


def test_checkpoint_round_trip_is_byte_stable(tmp_path):
    rng = np.random.default_rng(0)
    actor = build_actor("pe", 2, 4, 6, 1, rng=rng)
    critic = build_critic("fc", 2, 4, 6, 1, rng=rng)
    opt = Adam(critic, lr=1e-3, weight_decay=1e-4)
    critic(rng.normal(size=(3, 2, 5)).astype(np.float32))
    critic.backward(np.ones(3, dtype=np.float32))
    opt.step()
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, {"actor": actor, "critic": critic}, {"critic": opt}, {"seed": 3})
    save_checkpoint(b, {"actor": actor, "critic": critic}, {"critic": opt}, {"seed": 3})
    assert a.read_bytes() == b.read_bytes()

    nets, opts, meta = load_checkpoint(a)
    assert meta == {"seed": 3}
    for orig, loaded in ((actor, nets["actor"]), (critic, nets["critic"])):
        assert orig.spec() == loaded.spec()
        assert all(np.array_equal(x, y) for x, y in zip(orig.params, loaded.params))
    assert opts["critic"]["t"] == 1
    assert all(np.array_equal(x, y) for x, y in zip(opt.m, opts["critic"]["m"]))
    c = tmp_path / "c.ckpt"
    save_checkpoint(c, {"actor": nets["actor"], "critic": nets["critic"]}, {}, {"seed": 3})
    save_checkpoint(b, {"actor": actor, "critic": critic}, {}, {"seed": 3})
    assert c.read_bytes() == b.read_bytes()


def test_corrupt_checkpoint_rejected(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
