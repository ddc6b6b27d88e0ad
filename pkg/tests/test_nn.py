import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from costate_rl import nn
from costate_rl.nn import AdamState, MlpNet, MlpSpec, adam_step, backward, forward, param_count

from conftest import central_diff


def naive_forward(net, x):
    """Per-sample, per-unit loop evaluation."""
    out = np.zeros((net.spec.n_out, x.shape[1]))
    last = len(net.weights) - 1
    for j in range(x.shape[1]):
        h = list(x[:, j])
        for l, (w, b) in enumerate(zip(net.weights, net.biases)):
            z = [sum(w[r, c] * h[c] for c in range(len(h))) + b[r] for r in range(w.shape[0])]
            if l < last:
                h = [max(v, 0.0) for v in z]
            elif net.spec.output_activation == "tanh":
                h = [np.tanh(v) for v in z]
            else:
                h = z
        out[:, j] = h
    return out


def random_net(rng, sizes, out="linear"):
    net = MlpNet.init(MlpSpec(sizes, out), rng)
    for b in net.biases:
        b[...] = rng.normal(0, 0.3, b.shape)
    return net


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((3, 2))
    with pytest.raises(ValueError):
        MlpSpec((3, 0, 2))
    with pytest.raises(ValueError):
        MlpSpec((3, 4, 2), "sigmoid")


@pytest.mark.parametrize(
    "sizes, expected",
    [((10, 12, 12, 2), 314), ((30, 12, 12, 2), 554), ((100, 24, 24, 4), 3124), ((100, 4, 4, 4), 444)],
)
def test_param_count_published_policies(sizes, expected):
    assert param_count(MlpSpec(sizes)) == expected


@pytest.mark.parametrize("out", ["linear", "tanh"])
def test_zero_net_outputs_zero(out):
    net = MlpNet.zeros(MlpSpec((3, 5, 5, 2), out))
    y = net(np.random.default_rng(0).normal(size=(3, 7)))
    assert np.array_equal(y, np.zeros((2, 7)))


def test_relu_clamps_negative():
    net = MlpNet(MlpSpec((2, 2, 2)), [np.eye(2), np.eye(2)], [np.zeros(2), np.zeros(2)])
    y = net(np.array([[-3.0, 1.0], [2.0, -0.5]]))
    assert np.array_equal(y, [[0.0, 1.0], [2.0, 0.0]])


@pytest.mark.parametrize("out", ["linear", "tanh"])
def test_forward_matches_naive_loop(rng, out):
    net = random_net(rng, (4, 6, 5, 3), out)
    x = rng.normal(size=(4, 9))
    np.testing.assert_allclose(net(x), naive_forward(net, x), rtol=0, atol=1e-12)


def test_forward_rejects_bad_shape(rng):
    net = random_net(rng, (4, 6, 3))
    with pytest.raises(nn.ShapeError):
        net(np.zeros((5, 2)))


def test_backward_zero_dy(rng):
    net = random_net(rng, (4, 6, 3))
    y, cache = forward(net, rng.normal(size=(4, 5)))
    grads, dx = backward(net, cache, np.zeros_like(y))
    assert all(not g.any() for g in grads)
    assert not dx.any()


def test_linear_chain_rule():
    rng = np.random.default_rng(3)
    w1 = np.abs(rng.normal(size=(5, 3)))
    w2 = rng.normal(size=(2, 5))
    net = MlpNet(MlpSpec((3, 5, 2)), [w1, w2], [np.ones(5), np.zeros(2)])
    x = np.abs(rng.normal(size=(3, 1)))  # every hidden unit active
    y, cache = forward(net, x)
    for i in range(2):
        dy = np.zeros((2, 1))
        dy[i] = 1.0
        _, dx = backward(net, cache, dy)
        np.testing.assert_allclose(dx[:, 0], (w2 @ w1)[i], rtol=1e-14)


@pytest.mark.parametrize("sizes", [(3, 7, 2), (4, 6, 5, 3)])
@pytest.mark.parametrize("out", ["linear", "tanh"])
def test_backward_matches_finite_differences(sizes, out):
    rng = np.random.default_rng(sum(sizes))
    net = random_net(rng, sizes, out)
    x = rng.normal(size=(sizes[0], 4))
    dy = rng.normal(size=(sizes[-1], 4))
    y, cache = forward(net, x)
    grads, dx = backward(net, cache, dy)

    theta0 = net.flat()

    def loss_theta(theta):
        probe = net.copy()
        probe.set_flat(theta)
        return float(np.sum(dy * probe(x)))

    fd_theta = central_diff(loss_theta, theta0)
    np.testing.assert_allclose(nn.flatten_grads(grads), fd_theta, rtol=1e-5, atol=1e-9)
    fd_x = central_diff(lambda xx: float(np.sum(dy * net(xx))), x)
    np.testing.assert_allclose(dx, fd_x, rtol=1e-5, atol=1e-9)


def test_stale_cache_rejected(rng):
    net = random_net(rng, (3, 4, 2))
    y, cache = forward(net, rng.normal(size=(3, 2)))
    adam_step(net, [np.ones_like(p) for p in net.params()], AdamState.for_net(net), 0.1)
    with pytest.raises(nn.StaleCacheError):
        backward(net, cache, np.ones_like(y))
    other = random_net(rng, (3, 4, 2))
    with pytest.raises(nn.StaleCacheError):
        backward(other, forward(net, np.zeros((3, 1)))[1], np.ones((2, 1)))


def test_adam_zero_grad_keeps_params(rng):
    net = random_net(rng, (3, 4, 2))
    before = net.flat()
    adam_step(net, [np.zeros_like(p) for p in net.params()], AdamState.for_net(net), 1e-3)
    assert np.array_equal(net.flat(), before)


def test_adam_first_step_by_hand():
    net = MlpNet.zeros(MlpSpec((1, 1, 1)))
    state = AdamState.for_net(net)
    g = np.zeros_like(net.theta)
    g[0] = 1.0
    adam_step(net, g, state, 0.001)
    # m_hat = 1, v_hat = 1 after bias correction
    assert net.theta[0] == pytest.approx(-0.001 / (1.0 + 1e-8), rel=1e-15)
    assert state.step == 1


def test_adam_symmetric_parameters():
    net = MlpNet.zeros(MlpSpec((2, 2, 1)))
    state = AdamState.for_net(net)
    rng = np.random.default_rng(0)
    for _ in range(5):
        g = np.zeros_like(net.theta)
        g[:2] = rng.normal()
        adam_step(net, g, state, 0.01)
    assert net.theta[0] == net.theta[1]


def test_adam_skips_nonfinite(rng):
    net = random_net(rng, (3, 4, 2))
    state = AdamState.for_net(net)
    before = net.flat()
    g = np.zeros_like(net.theta)
    g[3] = np.nan
    assert adam_step(net, g, state, 0.1) is False
    assert state.skipped == 1 and state.step == 0
    assert np.array_equal(net.flat(), before)


def test_soft_update():
    a = MlpNet.zeros(MlpSpec((1, 2, 1)))
    b = a.copy()
    b.theta[:] = 1.0
    nn.soft_update(a, b, 0.0)
    assert not a.theta.any()
    nn.soft_update(a, b, 1.0)
    assert np.array_equal(a.theta, b.theta)


def test_checkpoint_roundtrip(tmp_path, rng):
    nets = {"mu": random_net(rng, (10, 12, 12, 2), "tanh"), "f": random_net(rng, (12, 5, 10))}
    path = tmp_path / "ck.npz"
    nn.save_nets(path, nets, {"note": np.arange(3)})
    loaded, extra = nn.load_nets(path)
    for k, net in nets.items():
        assert loaded[k].spec == net.spec
        assert np.array_equal(loaded[k].theta, net.theta)
    assert np.array_equal(extra["note"], np.arange(3))
    blob = nn.to_bytes(nets["mu"])
    assert np.array_equal(nn.from_bytes(blob).theta, nets["mu"].theta)


sizes_strategy = st.lists(st.integers(1, 6), min_size=3, max_size=4).map(tuple)


@settings(max_examples=30, deadline=None)
@given(sizes=sizes_strategy, seed=st.integers(0, 2**31 - 1), out=st.sampled_from(["linear", "tanh"]))
def test_properties(sizes, seed, out):
    rng = np.random.default_rng(seed)
    net = random_net(rng, sizes, out)
    x = rng.normal(size=(sizes[0], 3))
    # deterministic forward
    assert np.array_equal(net(x), net(x))
    # param_count equals the number of scalars adam touches
    assert param_count(net.spec) == net.theta.size == sum(p.size for p in net.params())
    # lr = 0 leaves parameters alone
    before = net.flat()
    adam_step(net, [rng.normal(size=p.shape) for p in net.params()], AdamState.for_net(net), 0.0)
    assert np.array_equal(net.flat(), before)
