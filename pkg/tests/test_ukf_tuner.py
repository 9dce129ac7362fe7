import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import random_spd
from residual_tuner.ukf_tuner import (
    TunerError,
    apply_update,
    init_state,
    robust_cholesky,
    sigma_points,
    sigma_weights,
    ukf_update,
)


def test_weights_hand_example():
    w = sigma_weights(1, alpha=1.0, beta=2.0, kappa=2.0)
    assert w.lam == pytest.approx(2.0)
    np.testing.assert_allclose(w.w_a, [2 / 3, 1 / 6, 1 / 6], rtol=1e-15)
    # w_c,0 = lam/(L+lam) + 1 - alpha^2 + beta
    assert w.w_c[0] == pytest.approx(2 / 3 + 2.0)


def test_weight_count_for_198():
    w = sigma_weights(198)
    assert w.w_a.size == 397 and w.w_c.size == 397


@settings(max_examples=50, deadline=None)
@given(L=st.integers(1, 250), alpha=st.floats(1e-2, 2.0), beta=st.floats(0.0, 4.0), kappa=st.floats(0.0, 3.0))
def test_weights_normalised(L, alpha, beta, kappa):
    w = sigma_weights(L, alpha, beta, kappa)
    assert w.w_a.sum() == pytest.approx(1.0, abs=1e-9 * max(1.0, abs(w.w_a[0])))


def test_weight_validation():
    with pytest.raises(ValueError):
        sigma_weights(0)
    with pytest.raises(ValueError):
        sigma_weights(3, alpha=0.0)
    with pytest.raises(ValueError):
        sigma_weights(2, alpha=1.0, kappa=-2.0)


def test_zero_covariance_points_collapse():
    c = np.array([1.0, -2.0, 0.5])
    pts = sigma_points(c, np.zeros((3, 3)), sigma_weights(3))
    assert pts.shape == (7, 3)
    assert np.array_equal(pts, np.tile(c, (7, 1)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), L=st.integers(1, 10), alpha=st.sampled_from([1e-1, 0.5, 1.0]))
def test_sigma_point_identities(seed, L, alpha):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=L)
    P = random_spd(rng, L)
    w = sigma_weights(L, alpha)
    pts = sigma_points(c, P, w)
    np.testing.assert_allclose(w.w_a @ pts, c, atol=1e-12, rtol=0)
    d = pts - c
    cov = (d.T * w.w_c) @ d
    assert np.linalg.norm(cov - P) <= 1e-9 * np.linalg.norm(P)


def test_robust_cholesky_jitter_and_failure():
    A, eps = robust_cholesky(np.eye(3))
    assert eps == 0.0
    np.testing.assert_allclose(A @ A.T, np.eye(3))
    # rank deficient PSD needs jitter
    v = np.array([[1.0, 1.0]])
    _, eps = robust_cholesky(v.T @ v)
    assert 0 < eps <= 1e-6
    with pytest.raises(TunerError):
        robust_cholesky(-np.eye(2))


def test_scalar_linear_case():
    state = init_state([0.0], m=1, p0=1.0, c_y=0.0, c_v=1.0)
    delta, new, diag = ukf_update(state, lambda y: 2 * y, [1.0])
    assert diag.extra["gain"][0, 0] == pytest.approx(0.4, abs=1e-12)
    assert delta[0] == pytest.approx(0.4, abs=1e-12)
    # P_new = P - K S K^T = 1 - 0.4 * 5 * 0.4 = 0.2
    assert new.P[0, 0] == pytest.approx(0.2, abs=1e-12)
    assert new.y_hat[0] == pytest.approx(0.4, abs=1e-12)
    assert new.updates == 1


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), L=st.integers(1, 5), m=st.integers(1, 5))
def test_gain_matches_linear_kalman(seed, L, m):
    rng = np.random.default_rng(seed)
    H = rng.normal(size=(m, L))
    b = rng.normal(size=m)
    state = init_state(rng.normal(size=L), m)
    P = random_spd(rng, L)
    Cv = random_spd(rng, m)
    state = type(state)(state.y_hat, P, 1e-3 * np.eye(L), Cv, state.weights)
    _, _, diag = ukf_update(state, lambda y: H @ y + b, rng.normal(size=m))
    Pp = P + 1e-3 * np.eye(L)
    K = Pp @ H.T @ np.linalg.inv(H @ Pp @ H.T + Cv)
    np.testing.assert_allclose(diag.extra["gain"], K, atol=1e-8, rtol=0)


def test_zero_innovation_gives_zero_delta():
    rng = np.random.default_rng(1)
    H = rng.normal(size=(4, 3))
    y0 = rng.normal(size=3)
    state = init_state(y0, 4)
    delta, _, diag = ukf_update(state, lambda y: H @ y, H @ y0)
    assert np.max(np.abs(delta)) <= 1e-10
    assert diag.innovation_norm <= 1e-10


def test_vectorized_matches_loop():
    rng = np.random.default_rng(2)
    H = rng.normal(size=(6, 4))
    state = init_state(rng.normal(size=4), 6)
    x_ref = rng.normal(size=6)
    f = lambda y: np.tanh(H @ y)  # noqa: E731
    d1, s1, _ = ukf_update(state, f, x_ref)
    d2, s2, _ = ukf_update(state, lambda Y: np.tanh(Y @ H.T), x_ref, vectorized=True)
    np.testing.assert_allclose(d1, d2, atol=1e-14)
    np.testing.assert_allclose(s1.P, s2.P, atol=1e-14)


def test_posterior_covariance_shrinks_and_stays_symmetric():
    rng = np.random.default_rng(3)
    H = rng.normal(size=(5, 3))
    state = init_state(np.zeros(3), 5, p0=1.0, c_y=0.0, c_v=0.1)
    traces = [np.trace(state.P)]
    for _ in range(5):
        _, state, diag = ukf_update(state, lambda y: H @ y, rng.normal(size=5))
        assert np.array_equal(state.P, state.P.T)
        traces.append(diag.trace_P)
    assert all(b < a for a, b in zip(traces, traces[1:]))


def test_non_finite_rollout_leaves_state_untouched():
    state = init_state(np.ones(2), 2)
    y_before, P_before = state.y_hat.copy(), state.P.copy()
    with pytest.raises(TunerError):
        ukf_update(state, lambda y: np.array([np.nan, 0.0]), np.zeros(2))
    with pytest.raises(TunerError):
        ukf_update(state, lambda y: y, np.array([np.inf, 0.0]))
    assert np.array_equal(state.y_hat, y_before) and np.array_equal(state.P, P_before)
    assert state.updates == 0


def test_reference_length_checked():
    state = init_state(np.zeros(2), 3)
    with pytest.raises(ValueError):
        ukf_update(state, lambda y: np.zeros(3), np.zeros(2))


def test_update_is_deterministic():
    rng = np.random.default_rng(4)
    H = rng.normal(size=(3, 3))
    state = init_state(rng.normal(size=3), 3)
    x = rng.normal(size=3)
    a = ukf_update(state, lambda y: np.sin(H @ y), x)
    b = ukf_update(state, lambda y: np.sin(H @ y), x)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1].P, b[1].P)


def test_apply_update():
    v = np.array([1.0, -2.0])
    assert np.array_equal(apply_update(v, np.zeros(2)), v)
    assert np.array_equal(apply_update(np.zeros(2), v), v)
    d1, d2 = np.array([0.5, 0.25]), np.array([-1.0, 2.0])
    assert np.array_equal(apply_update(apply_update(v, d1), d2), apply_update(v, d1 + d2))
    with pytest.raises(ValueError):
        apply_update(v, np.zeros(3))
