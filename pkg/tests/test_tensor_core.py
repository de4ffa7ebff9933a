"""Tests for the dense network substrate and distribution helpers."""

import numpy as np
import pytest

from dvm_marl.core.errors import NumericError, ParameterError, ShapeError
from dvm_marl.core.tensor_core import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    AdamState,
    CategoricalDist,
    Grad,
    ParamStore,
    SquashedGaussianDist,
    adam_step,
    backward,
    copy_params,
    forward,
    gumbel_softmax,
    gumbel_softmax_backward,
    init_params,
    kl_categorical,
    kl_gaussian,
    kl_gaussian_backward,
    one_hot,
    polyak_average,
    softmax_backward,
    softmax_with_temperature,
    squashed_gaussian_backward,
    squashed_gaussian_sample,
)
from tests.gradcheck import assert_grad_close, numerical_array_grad, numerical_grad


def test_init_params_shapes_and_bounds(rng):
    """Layers chain and stay within +-1/sqrt(fan_in)."""
    net = init_params([6, 8, 4, 2], rng)
    assert net.sizes == [6, 8, 4, 2]
    for w, b in zip(net.weights, net.biases):
        bound = 1.0 / np.sqrt(w.shape[1])
        assert np.all(np.abs(w) <= bound)
        assert np.all(np.abs(b) <= bound)


def test_param_store_rejects_broken_chain():
    """Adjacent layers must agree on width."""
    with pytest.raises(ShapeError):
        ParamStore([np.zeros((4, 3)), np.zeros((2, 5))], [np.zeros(4), np.zeros(2)])
    with pytest.raises(ShapeError):
        ParamStore([np.zeros((4, 3))], [np.zeros(3)])


def test_forward_single_matches_batch(rng):
    """A single vector and a batch row give the same output."""
    net = init_params([3, 8, 2], rng)
    x = rng.normal(size=(5, 3))
    batch_out = forward(net, x)
    assert batch_out.shape == (5, 2)
    np.testing.assert_allclose(forward(net, x[2]), batch_out[2])


def test_forward_rejects_wrong_width(rng):
    net = init_params([3, 4, 1], rng)
    with pytest.raises(ShapeError):
        forward(net, np.zeros(4))


def test_forward_is_pure(rng):
    """Identical inputs at different times give identical outputs."""
    net = init_params([4, 8, 1], rng)
    x = rng.normal(size=(7, 4))
    first = forward(net, x)
    forward(net, rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(forward(net, x), first)


@pytest.mark.parametrize("seed", range(50))
def test_backward_matches_finite_differences(seed):
    """Parameter and input gradients of <upstream, f(x)> agree with central differences."""
    rng = np.random.default_rng(seed)
    net = init_params([3, 8, 8, 2], rng)
    x = rng.normal(size=(4, 3))
    upstream = rng.normal(size=(4, 2))

    grad, grad_x = backward(net, x, upstream)
    numeric = numerical_grad(net, lambda: float(np.sum(upstream * forward(net, x))))
    assert_grad_close(grad, numeric)

    numeric_x = numerical_array_grad(x, lambda xx: float(np.sum(upstream * forward(net, xx))))
    np.testing.assert_allclose(grad_x, numeric_x, rtol=1e-4, atol=1e-6)


def test_backward_rejects_bad_upstream(rng):
    net = init_params([3, 4, 2], rng)
    with pytest.raises(ShapeError):
        backward(net, np.zeros((5, 3)), np.zeros((5, 3)))


def test_adam_step_descends_quadratic(rng):
    """Adam on ||W||^2 shrinks the parameters."""
    net = init_params([4, 3], rng)
    state = AdamState.for_params(net, 0.05)
    start = sum(float(np.sum(a**2)) for a in net.arrays())
    for _ in range(200):
        grad = Grad([2.0 * w for w in net.weights], [2.0 * b for b in net.biases])
        adam_step(net, grad, state)
    end = sum(float(np.sum(a**2)) for a in net.arrays())
    assert state.step == 200
    assert end < 0.01 * start


def test_adam_step_zero_gradient_leaves_params(rng):
    net = init_params([3, 2], rng)
    before = net.copy()
    adam_step(net, Grad.zeros_for(net), AdamState.for_params(net, 0.1))
    for a, b in zip(net.arrays(), before.arrays()):
        np.testing.assert_array_equal(a, b)


def test_adam_step_errors(rng):
    """Mismatched or non-finite gradients are rejected."""
    net = init_params([3, 2], rng)
    state = AdamState.for_params(net, 0.1)
    with pytest.raises(ShapeError):
        adam_step(net, Grad.zeros_for(init_params([3, 3], rng)), state)
    bad = Grad.zeros_for(net)
    bad.weights[0][0, 0] = np.nan
    with pytest.raises(NumericError):
        adam_step(net, bad, state)


def test_polyak_full_step_copies(rng):
    target = init_params([3, 4, 1], rng)
    source = init_params([3, 4, 1], rng)
    polyak_average(target, source, 1.0)
    for t, s in zip(target.arrays(), source.arrays()):
        np.testing.assert_array_equal(t, s)


def test_polyak_gap_halves_in_about_69_updates(rng):
    """With rho = 0.01 the target-source gap decays geometrically."""
    source = init_params([2, 3], rng)
    target = source.zeros_like()
    gap0 = np.abs(source.weights[0] - target.weights[0])
    for _ in range(69):
        polyak_average(target, source, 0.01)
    ratio = np.abs(source.weights[0] - target.weights[0]) / gap0
    np.testing.assert_allclose(ratio, 0.99**69)
    assert 0.49 < float(ratio.mean()) < 0.51


def test_copy_params_has_no_aliasing(rng):
    target = init_params([3, 2], rng)
    source = init_params([3, 2], rng)
    copy_params(target, source)
    source.weights[0][0, 0] += 1.0
    assert target.weights[0][0, 0] != source.weights[0][0, 0]


def test_softmax_temperature():
    """Probabilities sum to one; low temperature sharpens toward the argmax."""
    logits = np.array([1.0, 2.0, 0.5])
    warm = softmax_with_temperature(logits, 1.0)
    cold = softmax_with_temperature(logits, 0.05)
    assert warm.probs.sum() == pytest.approx(1.0)
    assert cold.probs[1] > 0.99
    assert int(warm.greedy()) == 1
    with pytest.raises(ParameterError):
        softmax_with_temperature(logits, 0.0)
    with pytest.raises(ParameterError):
        softmax_with_temperature(logits, -1.0)


def test_softmax_is_stable_for_large_logits():
    probs = softmax_with_temperature(np.array([1000.0, 999.0]), 1.0).probs
    assert np.all(np.isfinite(probs))
    assert probs[0] == pytest.approx(1.0 / (1.0 + np.exp(-1.0)))


def test_softmax_backward_finite_differences(rng):
    logits = rng.normal(size=(3, 5))
    upstream = rng.normal(size=(3, 5))
    tau = 0.7
    probs = softmax_with_temperature(logits, tau).probs
    analytic = softmax_backward(probs, upstream, tau)
    numeric = numerical_array_grad(
        logits, lambda z: float(np.sum(upstream * softmax_with_temperature(z, tau).probs))
    )
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8)


def test_kl_categorical_properties(rng):
    """Zero for identical distributions, nonnegative otherwise, 0 log 0 = 0."""
    p = softmax_with_temperature(rng.normal(size=(4, 5)), 1.0)
    q = softmax_with_temperature(rng.normal(size=(4, 5)), 1.0)
    np.testing.assert_allclose(kl_categorical(p, p), 0.0, atol=1e-15)
    assert np.all(kl_categorical(p, q) >= 0.0)

    sparse = CategoricalDist(np.array([1.0, 0.0]))
    other = CategoricalDist(np.array([0.5, 0.5]))
    assert kl_categorical(sparse, other) == pytest.approx(np.log(2.0))
    with pytest.raises(ShapeError):
        kl_categorical(sparse, CategoricalDist(np.ones(3) / 3))


def test_one_hot():
    np.testing.assert_array_equal(one_hot([2, 0], 3), [[0, 0, 1], [1, 0, 0]])


def test_gumbel_softmax_approaches_one_hot(rng):
    """At temperature 0.01 on well-separated logits the sample is nearly one-hot."""
    logits = np.array([0.0, 10.0, 0.0, 0.0, 0.0])
    for _ in range(20):
        sample = gumbel_softmax(logits, 0.01, rng.uniform(size=5))
        assert sample.sum() == pytest.approx(1.0)
        assert np.max(np.delete(sample, 1)) < 0.01


def test_gumbel_softmax_backward_finite_differences(rng):
    logits = rng.normal(size=(4, 5))
    uniform = rng.uniform(size=(4, 5))
    upstream = rng.normal(size=(4, 5))
    temperature = 0.8
    sample = gumbel_softmax(logits, temperature, uniform)
    analytic = gumbel_softmax_backward(sample, upstream, temperature)
    numeric = numerical_array_grad(
        logits, lambda z: float(np.sum(upstream * gumbel_softmax(z, temperature, uniform)))
    )
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8)


def test_squashed_gaussian_clamps_log_std():
    dist = SquashedGaussianDist(np.zeros(2), np.array([-40.0, 10.0]))
    np.testing.assert_array_equal(dist.log_std, [LOG_STD_MIN, LOG_STD_MAX])


def test_squashed_gaussian_from_output_splits_halves():
    dist = SquashedGaussianDist.from_output(np.array([[0.1, 0.2, -0.3, -0.4]]))
    np.testing.assert_array_equal(dist.mean, [[0.1, 0.2]])
    np.testing.assert_array_equal(dist.log_std, [[-0.3, -0.4]])
    np.testing.assert_allclose(dist.deterministic(), np.tanh([[0.1, 0.2]]))
    with pytest.raises(ShapeError):
        SquashedGaussianDist.from_output(np.zeros(3))


def test_squashed_gaussian_deterministic_limit():
    """With the stddev clamped to its floor only the squashing correction remains."""
    mean = np.array([0.3, -1.2])
    noise = np.array([0.5, -0.25])
    dist = SquashedGaussianDist(mean, np.full(2, -40.0))
    action, log_prob = squashed_gaussian_sample(dist, noise)

    np.testing.assert_allclose(action, np.tanh(mean), atol=1e-8)
    expected = np.sum(
        -0.5 * noise**2 - LOG_STD_MIN - 0.5 * np.log(2 * np.pi) - np.log(1 - np.tanh(mean) ** 2)
    )
    assert log_prob == pytest.approx(expected, rel=1e-8)


def test_squashed_gaussian_log_prob_is_stable_when_saturated():
    dist = SquashedGaussianDist(np.array([30.0]), np.array([0.0]))
    action, log_prob = squashed_gaussian_sample(dist, np.array([0.0]))
    assert np.all(np.abs(action) < 1.0)
    assert np.isfinite(log_prob)


def test_squashed_gaussian_density_matches_samples():
    """Monte-Carlo mass of an interval agrees with the integrated density."""
    rng = np.random.default_rng(7)
    mean, log_std = 0.4, np.log(0.8)
    dist = SquashedGaussianDist(np.full(200_000, mean), np.full(200_000, log_std))
    samples, _ = squashed_gaussian_sample(dist, rng.standard_normal(200_000))

    lo, hi = -0.2, 0.6
    grid = np.linspace(lo, hi, 2001)
    noise = (np.arctanh(grid) - mean) / np.exp(log_std)
    _, log_density = squashed_gaussian_sample(
        SquashedGaussianDist(np.full((grid.size, 1), mean), np.full((grid.size, 1), log_std)),
        noise[:, None],
    )
    density = np.exp(log_density)
    mass = float(np.sum(0.5 * (density[1:] + density[:-1]) * np.diff(grid)))
    empirical = np.mean((samples >= lo) & (samples <= hi))
    assert empirical == pytest.approx(mass, abs=0.01)


@pytest.mark.parametrize("seed", range(50))
def test_squashed_gaussian_backward_finite_differences(seed):
    """Mean and log-stddev gradients of <ga, a> + <glp, log pi> agree with differences."""
    rng = np.random.default_rng(seed)
    mean = rng.normal(scale=0.5, size=(3, 2))
    log_std = rng.normal(scale=0.3, size=(3, 2))
    noise = rng.standard_normal((3, 2))
    grad_action = rng.normal(size=(3, 2))
    grad_log_prob = rng.normal(size=3)

    def objective(m, ls):
        action, log_prob = squashed_gaussian_sample(SquashedGaussianDist(m, ls), noise)
        return float(np.sum(grad_action * action) + np.sum(grad_log_prob * log_prob))

    g_mean, g_log_std = squashed_gaussian_backward(
        mean, log_std, noise, grad_action, grad_log_prob
    )
    np.testing.assert_allclose(
        g_mean, numerical_array_grad(mean, lambda m: objective(m, log_std)), rtol=1e-4, atol=1e-6
    )
    np.testing.assert_allclose(
        g_log_std,
        numerical_array_grad(log_std, lambda ls: objective(mean, ls)),
        rtol=1e-4,
        atol=1e-6,
    )


def test_squashed_gaussian_backward_masks_clamped_log_std():
    _, g_log_std = squashed_gaussian_backward(
        np.zeros(2), np.array([-30.0, 5.0]), np.ones(2), np.ones(2), np.array(1.0)
    )
    np.testing.assert_array_equal(g_log_std, [0.0, 0.0])


def test_kl_gaussian_zero_for_identical_and_gradients(rng):
    mean_p, log_std_p = rng.normal(size=4), rng.normal(scale=0.3, size=4)
    mean_q, log_std_q = rng.normal(size=4), rng.normal(scale=0.3, size=4)
    np.testing.assert_allclose(kl_gaussian(mean_p, log_std_p, mean_p, log_std_p), 0.0, atol=1e-15)
    assert np.all(kl_gaussian(mean_p, log_std_p, mean_q, log_std_q) >= 0.0)

    g_mean, g_log_std = kl_gaussian_backward(mean_p, log_std_p, mean_q, log_std_q)
    np.testing.assert_allclose(
        g_mean,
        numerical_array_grad(
            mean_q, lambda m: float(np.sum(kl_gaussian(mean_p, log_std_p, m, log_std_q)))
        ),
        rtol=1e-4,
        atol=1e-6,
    )
    np.testing.assert_allclose(
        g_log_std,
        numerical_array_grad(
            log_std_q, lambda ls: float(np.sum(kl_gaussian(mean_p, log_std_p, mean_q, ls)))
        ),
        rtol=1e-4,
        atol=1e-6,
    )
