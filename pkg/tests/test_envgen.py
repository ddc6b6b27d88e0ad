import dataclasses

import numpy as np
import pytest

from costate_rl.envgen import (
    DivergenceError,
    TaskSpec,
    make_task,
    random_actions,
    random_states,
)

from conftest import central_diff


@pytest.mark.parametrize(
    "kw",
    [dict(n_s=9), dict(n_C=3), dict(n_C=12), dict(n_c=3, n_C=4), dict(n_c=0), dict(dynamics="quadratic"), dict(noise_sigma=-1)],
)
def test_invalid_specs_rejected(kw):
    with pytest.raises(ValueError):
        TaskSpec(**kw)


def test_action_dimension():
    assert TaskSpec(n_s=10, n_c=1, n_C=4).n_a == 2
    assert TaskSpec(n_s=100, n_c=2, n_C=8).n_a == 4


@pytest.mark.parametrize("kind", ["linear", "tanh"])
def test_same_seed_same_environment(kind):
    a = make_task(TaskSpec(dynamics=kind, seed=5))
    b = make_task(TaskSpec(dynamics=kind, seed=5))
    c = make_task(TaskSpec(dynamics=kind, seed=6))
    assert a.fingerprint() == b.fingerprint() != c.fingerprint()


def test_cost_matrix_layout():
    env = make_task(TaskSpec(n_s=10, n_c=2, n_C=6))
    assert np.array_equal(env.b_diag, [10, 10, 0, 0, 0, 0, 0, 0, 0, 0])


def test_linear_spectral_bound():
    env = make_task(TaskSpec(n_s=100, n_c=2, n_C=8, seed=3))
    assert np.linalg.norm(env.params["A"], 2) <= 1.5 + 1e-12


@pytest.mark.parametrize("kind", ["linear", "tanh"])
def test_zero_is_fixed_point(kind):
    env = make_task(TaskSpec(dynamics=kind))
    s = np.zeros((10, 3))
    assert np.array_equal(env.step(s, np.zeros((2, 3))), s)


def test_zero_velocity_keeps_configuration():
    env = make_task(TaskSpec())
    env.params["A"][:] = 0.0
    s = random_states(np.random.default_rng(0), 10, 4)
    s[5:] = 0.0
    out = env.step(s, np.zeros((2, 4)))
    assert np.array_equal(out[:5], s[:5])


@pytest.mark.parametrize("kind", ["linear", "tanh"])
def test_second_order_structure(kind):
    env = make_task(TaskSpec(dynamics=kind, seed=2))
    rng = np.random.default_rng(1)
    s = random_states(rng, 10, 6)
    a = random_actions(rng, 2, 6)
    out = env.step(s, a)
    np.testing.assert_array_equal(out[:5], s[:5] + env.dt * s[5:])


@pytest.mark.parametrize("kind", ["linear", "tanh"])
def test_relevance_closure(kind):
    """Perturbing irrelevant elements never moves the relevant ones."""
    env = make_task(TaskSpec(n_s=10, n_c=1, n_C=4, dynamics=kind, seed=4))
    rng = np.random.default_rng(9)
    s1 = random_states(rng, 10, 5)
    s2 = s1.copy()
    irrelevant = np.setdiff1d(np.arange(10), env.spec.relevant)
    s2[irrelevant] += rng.normal(size=(irrelevant.size, 5))
    rel = env.spec.relevant
    for _ in range(30):
        a = np.tanh(3 * s1[rel[:2]])  # any action rule that reads only relevant elements
        s1, s2 = env.step(s1, a), env.step(s2, a)
        np.testing.assert_array_equal(s1[rel], s2[rel])
        np.testing.assert_array_equal(env.cost_rate(s1), env.cost_rate(s2))


def test_cost_locality():
    env = make_task(TaskSpec(n_s=10, n_c=2, n_C=6))
    s = random_states(np.random.default_rng(0), 10, 4)
    t = s.copy()
    t[2:] += 5.0
    assert np.array_equal(env.cost_rate(s), env.cost_rate(t))


def test_cost_values():
    env = make_task(TaskSpec())
    assert env.cost_rate(np.zeros((10, 1)))[0, 0] == 0.0
    s = np.zeros((10, 1))
    s[0] = 1.0
    assert env.cost_rate(s)[0, 0] == pytest.approx(0.9999999958776927, abs=1e-15)
    s = np.zeros((10, 1))
    s[1:] = 3.0
    assert env.cost_rate(s)[0, 0] == 0.0


def test_cprime_properties():
    env = make_task(TaskSpec(n_c=2, n_C=4))
    s = random_states(np.random.default_rng(0), 10, 8)
    assert (env.cprime(s) >= 0).all()
    assert env.cprime(np.zeros((10, 1)))[0, 0] == 0.0
    np.testing.assert_allclose(np.tanh(env.cprime(s)), env.cost_rate(s), rtol=0, atol=1e-15)
    np.testing.assert_allclose(env.cprime(2 * s), 4 * env.cprime(s), rtol=1e-15)


def test_cost_grad_matches_finite_differences():
    env = make_task(TaskSpec(n_c=2, n_C=4))
    rng = np.random.default_rng(2)
    s = 0.3 * random_states(rng, 10, 1)
    grad = env.cost_grad(s)
    fd = central_diff(lambda x: float(env.cost_rate(x)[0, 0]), s)
    np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-12)
    assert not grad[2:].any()
    assert not env.cost_grad(np.zeros((10, 1))).any()


@pytest.mark.parametrize("kind", ["linear", "tanh"])
def test_vjp_matches_finite_differences(kind):
    env = make_task(TaskSpec(n_s=6, n_c=1, n_C=4, dynamics=kind, seed=8))
    rng = np.random.default_rng(3)
    s = random_states(rng, 6, 1)
    a = random_actions(rng, 2, 1)
    w = rng.normal(size=(6, 1))
    ws, wa = env.vjp(s, a, w)
    np.testing.assert_allclose(ws, central_diff(lambda x: float(np.sum(w * env.f(x, a))), s), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(wa, central_diff(lambda x: float(np.sum(w * env.f(s, x))), a), rtol=1e-6, atol=1e-9)


def test_noise_mean_converges():
    spec = TaskSpec(noise_sigma=2.0, seed=1)
    env = make_task(spec)
    det = make_task(dataclasses.replace(spec, noise_sigma=0.0))
    s = np.tile(random_states(np.random.default_rng(0), 10, 1), (1, 10_000))
    a = np.zeros((2, 10_000))
    mean = env.step(s, a, np.random.default_rng(5)).mean(axis=1)
    expected = det.step(s[:, :1], a[:, :1])[:, 0]
    tol = 3 * spec.noise_sigma * env.dt / np.sqrt(10_000)
    assert np.all(np.abs(mean - expected) <= tol + 1e-12)
    # noise only enters the velocity block
    np.testing.assert_allclose(mean[:5], expected[:5], rtol=0, atol=1e-12)


def test_noise_requires_rng():
    env = make_task(TaskSpec(noise_sigma=1.0))
    with pytest.raises(ValueError):
        env.step(np.zeros((10, 1)), np.zeros((2, 1)))


def test_noiseless_step_deterministic():
    env = make_task(TaskSpec(seed=3))
    s = random_states(np.random.default_rng(0), 10, 3)
    a = random_actions(np.random.default_rng(1), 2, 3)
    assert np.array_equal(env.step(s, a), env.step(s, a))


def test_divergence_flagged():
    env = make_task(TaskSpec())
    s = np.full((10, 1), np.inf)
    with pytest.raises(DivergenceError):
        env.step(s, np.zeros((2, 1)))


def test_shape_checks():
    env = make_task(TaskSpec())
    with pytest.raises(ValueError):
        env.step(np.zeros((8, 1)), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        env.step(np.zeros((10, 2)), np.zeros((2, 1)))
