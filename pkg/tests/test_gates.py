import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dmcp import tensor as T
from dmcp.gates import (
    GateMode,
    GateParams,
    bernoulli_marginals,
    bernoulli_sample,
    fuse,
    init_gate,
    marginal_probs,
    marginals,
    retain_distribution,
    run_markov_sampling,
    transition_probs,
)
from dmcp.tensor import ShapeError, Tape, Tensor

from oracles import max_rel_error, numeric_grad

alphas = st.integers(1, 12).flatmap(
    lambda g: arrays(np.float64, g - 1, elements=st.floats(-8, 8, allow_nan=False))
)


def _gate(alpha, group_size=1, mode=GateMode.MARKOV):
    alpha = np.asarray(alpha, dtype=np.float64)
    return GateParams(len(alpha) + 1, group_size, Tensor(alpha.copy(), requires_grad=True), mode)


def _logit(p):
    return np.log(p / (1 - p))


# -- transitions and marginals --------------------------------------------


def test_transition_examples():
    np.testing.assert_array_equal(transition_probs(_gate(np.zeros(3))), [1, 0.5, 0.5, 0.5])
    assert transition_probs(_gate([40.0]))[1] > 1 - 1e-12
    assert transition_probs(_gate([-800.0, 800.0])).tolist() == [1.0, 0.0, 1.0]


@given(alphas)
def test_first_transition_is_one(alpha):
    p = transition_probs(_gate(alpha))
    assert p[0] == 1.0 and np.all((p >= 0) & (p <= 1))


def test_marginal_examples():
    g = _gate(_logit(np.array([0.5, 0.5])))
    np.testing.assert_allclose(marginal_probs(g), [1, 0.5, 0.25])
    np.testing.assert_allclose(marginal_probs(_gate([50.0] * 4)), np.ones(5))


@given(alphas)
def test_marginals_non_increasing(alpha):
    m = marginal_probs(_gate(alpha))
    assert m[0] == 1.0
    assert np.all(np.diff(m) <= 0)


@given(alphas, st.data())
def test_raising_alpha_never_lowers_marginals(alpha, data):
    if len(alpha) == 0:
        return
    j = data.draw(st.integers(0, len(alpha) - 1))
    bumped = alpha.copy()
    bumped[j] += data.draw(st.floats(0.01, 4))
    assert np.all(marginal_probs(_gate(bumped)) >= marginal_probs(_gate(alpha)))


@given(alphas)
def test_closed_form_distribution_consistency(alpha):
    g = _gate(alpha)
    dist = retain_distribution(g)
    assert dist.sum() == pytest.approx(1.0, abs=1e-12)
    ks = np.arange(1, g.num_groups + 1)
    assert (ks * dist).sum() == pytest.approx(marginal_probs(g).sum(), abs=1e-10)


# -- Markov sampling ------------------------------------------------------


def test_sampling_degenerate_chains():
    rng = np.random.default_rng(0)
    full = _gate([800.0] * 5)
    assert all(run_markov_sampling(full, rng) == 6 for _ in range(50))
    assert np.all(run_markov_sampling(full, rng, size=100) == 6)
    stop = _gate([-800.0, 800.0, 800.0])
    assert all(run_markov_sampling(stop, rng) == 1 for _ in range(50))
    assert run_markov_sampling(_gate([]), rng) == 1


def _within_3_sigma(counts, probs, n=None):
    n = counts.sum() if n is None else n
    sigma = np.sqrt(n * probs * (1 - probs))
    return np.abs(counts - n * probs) <= 3 * sigma + 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_sampling_matches_closed_form(seed):
    rng = np.random.default_rng(seed)
    g = init_gate(6, 2, rng, init_prob=0.7, noise=1.0)
    draws = run_markov_sampling(g, rng, size=100_000)
    counts = np.bincount(draws, minlength=g.num_groups + 1)[1:]
    assert _within_3_sigma(counts, retain_distribution(g)).all()
    kept = (draws[:, None] >= np.arange(1, g.num_groups + 1)).sum(axis=0)
    assert _within_3_sigma(kept, marginal_probs(g), len(draws)).all()


def test_scalar_and_vector_sampling_agree_in_distribution():
    rng = np.random.default_rng(1)
    g = _gate([0.3, -0.2, 1.0])
    scalar = np.array([run_markov_sampling(g, rng) for _ in range(20_000)])
    counts = np.bincount(scalar, minlength=5)[1:]
    assert _within_3_sigma(counts, retain_distribution(g)).all()


# -- fuse and its gradient ------------------------------------------------


def test_fuse_identity_and_zeroing():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 6, 3, 3)))
    np.testing.assert_array_equal(fuse(x, _gate([60.0, 60.0], 2)).data, x.data)
    out = fuse(x, _gate([-800.0, 0.0], 2)).data
    np.testing.assert_array_equal(out[:, :2], x.data[:, :2])
    assert np.all(out[:, 2:] == 0)


def test_fuse_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        fuse(Tensor(np.zeros((1, 5, 2, 2))), _gate([0.0, 0.0], 2))


@given(alphas, st.integers(0, 2**31 - 1))
@settings(deadline=None)
def test_marginal_gradient_matches_hand_formula(alpha, seed):
    g = _gate(alpha)
    c = np.random.default_rng(seed).normal(size=g.num_groups)
    with Tape() as tape:
        loss = T.tsum(T.mul(marginals(g), Tensor(c)))
    tape.backward(loss)
    p, m = transition_probs(g), marginal_probs(g)
    expect = np.zeros(g.num_groups - 1)
    for j in range(1, g.num_groups):
        for k in range(g.num_groups):
            if j <= k:
                expect[j - 1] += c[k] * m[k] * (1 - p[j])
    got = np.zeros_like(expect) if g.alpha.grad is None else g.alpha.grad
    np.testing.assert_allclose(got, expect, atol=1e-12)


@pytest.mark.parametrize("mode", list(GateMode))
def test_conv_bn_fuse_gradient_finite_differences(mode):
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(4, 3, 5, 5)))
    w = Tensor(rng.normal(size=(8, 3, 3, 3)))
    gamma, beta = Tensor(rng.uniform(0.5, 1.5, 8)), Tensor(rng.normal(size=8))
    g = _gate(rng.normal(size=3), 2, mode)
    r = rng.normal(size=(4, 8, 5, 5))

    def forward():
        h = T.batch_norm(T.conv2d(x, w, 1, 1), gamma, beta, np.zeros(8), np.ones(8), True)
        h = T.relu(fuse(h, g))
        return T.tsum(T.mul(h, Tensor(r)))

    with Tape() as tape:
        loss = forward()
    tape.backward(loss)

    def f():
        with T.no_tape():
            return forward().item()

    num = numeric_grad(f, g.alpha.data, eps=1e-5)
    assert max_rel_error({i: g.alpha.grad[i] for i in num}, num) < 1e-3


@given(alphas, st.integers(1, 3), st.data())
@settings(deadline=None)
def test_fuse_commutes_with_prefix_slicing(alpha, gs, data):
    g = _gate(alpha, gs)
    k = data.draw(st.integers(1, g.num_groups))
    x = Tensor(np.random.default_rng(k).normal(size=(2, g.channels, 2, 2)))
    fused_then_sliced = fuse(x, g).data[:, : k * gs]
    truncated = _gate(alpha[: k - 1], gs)
    sliced_then_fused = fuse(Tensor(x.data[:, : k * gs]), truncated).data
    np.testing.assert_array_equal(fused_then_sliced, sliced_then_fused)


# -- initialization -------------------------------------------------------


def test_init_gate_near_target_probability():
    g = init_gate(10, 3, np.random.default_rng(0))
    p = transition_probs(g)[1:]
    lo, hi = 1 / (1 + np.exp(-(_logit(0.9) - 0.1))), 1 / (1 + np.exp(-(_logit(0.9) + 0.1)))
    assert np.all((p >= lo) & (p <= hi))
    assert g.channels == 30 and g.alpha.requires_grad


def test_gate_validation():
    with pytest.raises(ValueError):
        GateParams(0, 1)
    with pytest.raises(ShapeError):
        GateParams(3, 1, Tensor(np.zeros(3)))


# -- Bernoulli variant ----------------------------------------------------


def test_bernoulli_marginals_examples():
    g = _gate(np.zeros(3), mode=GateMode.BERNOULLI)
    np.testing.assert_array_equal(bernoulli_marginals(g), [1, 0.5, 0.5, 0.5])
    np.testing.assert_allclose(bernoulli_marginals(_gate([50.0] * 3, mode="bernoulli")), 1.0)
    np.testing.assert_array_equal(marginal_probs(g), bernoulli_marginals(g))


def test_bernoulli_marginals_rejects_markov():
    with pytest.raises(ValueError):
        bernoulli_marginals(_gate([0.0]))


def test_bernoulli_sampling_produces_gaps():
    g = _gate(np.zeros(5), mode=GateMode.BERNOULLI)
    masks = bernoulli_sample(g, np.random.default_rng(0), size=10_000)
    assert masks[:, 0].all()
    gaps = masks[:, 2] & ~masks[:, 1]
    assert gaps.any()
    assert _within_3_sigma(masks.sum(axis=0)[1:], bernoulli_marginals(g)[1:], len(masks)).all()


def test_bernoulli_gradient_is_independent_sigmoids():
    g = _gate([0.3, -1.0, 2.0], mode=GateMode.BERNOULLI)
    c = np.array([5.0, 1.0, 2.0, 3.0])
    with Tape() as tape:
        loss = T.tsum(T.mul(marginals(g), Tensor(c)))
    tape.backward(loss)
    p = bernoulli_marginals(g)[1:]
    np.testing.assert_allclose(g.alpha.grad, c[1:] * p * (1 - p))
