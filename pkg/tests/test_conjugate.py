import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actx import tensor_core as tc
from actx.attention import AttentionHyper
from actx.conjugate import (
    diff,
    eta,
    eta_matrix,
    from_voxel_matrix,
    loss_action_sim,
    loss_context_diff,
    sim,
    to_voxel_matrix,
)
from actx.tensor_core import constant, variable

from oracles import eta_loop, pair_losses_loop


def test_voxel_matrix_order_and_round_trip():
    F = np.random.default_rng(0).normal(size=(2, 3, 4, 5))
    X = to_voxel_matrix(constant(F)).value
    assert X.shape == (5, 24)
    # column j is voxel (t, h, w) in t-major order
    assert np.array_equal(X[:, 1 * 12 + 2 * 4 + 3], F[1, 2, 3])
    back = from_voxel_matrix(constant(X), (2, 3, 4)).value
    assert np.array_equal(back, F)


def test_eta_gamma_zero_is_column_mean():
    rng = np.random.default_rng(1)
    Z = rng.normal(size=(4, 7))
    out = eta(constant(rng.normal(size=4)), constant(Z), 0.0).value
    assert np.allclose(out, Z.mean(axis=1), atol=1e-12, rtol=0)


def test_eta_single_column():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(3, 1))
    for gamma in (0.0, 1.0, 50.0):
        assert np.allclose(eta(constant(rng.normal(size=3)), constant(z), gamma).value, z[:, 0], atol=1e-15)


def test_eta_large_gamma_picks_best_cosine_column():
    rng = np.random.default_rng(3)
    Z = rng.normal(size=(5, 9))
    x = rng.normal(size=5)
    cos = (Z.T @ x) / (np.linalg.norm(Z, axis=0) * np.linalg.norm(x))
    best = int(np.argmax(cos))
    out = eta(constant(x), constant(Z), 1e6).value
    assert np.max(np.abs(out - Z[:, best])) <= 1e-6


def test_eta_zero_vector_error_names_voxel():
    Z = np.ones((3, 4))
    Z[:, 2] = 0.0
    with pytest.raises(tc.TensorError, match="voxel 2"):
        eta(constant([1.0, 0.0, 0.0]), constant(Z), 1.0)


def test_sim_and_diff_examples():
    x = constant([1.0, 2.0, -1.0])
    assert sim(x, x, 0.5).item() == pytest.approx(0.5, abs=1e-15)
    assert sim(constant([1.0, 0.0]), constant([0.0, 3.0]), 0.5).item() == 0.0
    assert diff(x, x).item() == pytest.approx(0.0, abs=1e-15)
    assert diff(x, -x).item() == pytest.approx(2.0, abs=1e-15)


def test_sim_zero_vector_rejected():
    with pytest.raises(tc.TensorError):
        sim(constant([0.0, 0.0]), constant([1.0, 0.0]), 0.1)


def test_losses_when_conjugate_equals_action():
    X = constant(np.random.default_rng(4).normal(size=(4, 6)) + 2.0)
    w = constant(np.ones(6))
    hyper = AttentionHyper(xi=0.3)
    assert loss_action_sim(X, X, w, hyper).item() == pytest.approx(0.7, abs=1e-12)
    assert abs(loss_context_diff(X, X, w, hyper).item()) <= 1e-10


def test_losses_with_negated_conjugate():
    X = np.random.default_rng(5).normal(size=(3, 5)) + 1.0
    hyper = AttentionHyper(gamma=0.0, xi=0.0)
    w = constant(np.random.default_rng(6).uniform(0.1, 1, 5))
    assert loss_context_diff(constant(X), constant(-X), w, hyper).item() == pytest.approx(2.0, abs=1e-12)
    assert loss_action_sim(constant(X), constant(-X), w, hyper).item() == 0.0


def test_losses_orthogonal_supports_clip_to_zero():
    X = np.zeros((4, 3))
    X[:2] = np.random.default_rng(7).uniform(0.5, 1.5, size=(2, 3))
    Z = np.zeros((4, 5))
    Z[2:] = np.random.default_rng(8).uniform(0.5, 1.5, size=(2, 5))
    assert loss_action_sim(constant(X), constant(Z), constant(np.ones(3)), AttentionHyper(xi=0.0)).item() == 0.0


def test_zero_weight_sum_rejected():
    X = constant(np.ones((2, 3)))
    with pytest.raises(tc.TensorError):
        loss_action_sim(X, X, constant(np.zeros(3)), AttentionHyper())


@pytest.mark.parametrize("seed", range(5))
def test_losses_match_double_loop(seed):
    rng = np.random.default_rng(seed)
    N, M, D = int(rng.integers(1, 13)), int(rng.integers(1, 13)), int(rng.integers(2, 6))
    X, Z = rng.normal(size=(D, N)), rng.normal(size=(D, M))
    s, c = rng.uniform(0.01, 1, N), rng.uniform(0.01, 1, N)
    hyper = AttentionHyper(gamma=float(rng.uniform(0, 10)), xi=float(rng.uniform(0, 0.5)))
    ref_s, ref_c = pair_losses_loop(X, Z, s, c, hyper.gamma, hyper.xi)
    assert abs(loss_action_sim(constant(X), constant(Z), constant(s), hyper).item() - ref_s) <= 1e-10
    assert abs(loss_context_diff(constant(X), constant(Z), constant(c), hyper).item() - ref_c) <= 1e-10
    got = eta_matrix(constant(X), constant(Z), hyper.gamma).value
    for i in range(N):
        assert np.allclose(got[:, i], eta_loop(X[:, i], Z, hyper.gamma), atol=1e-12, rtol=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_loss_invariances(seed, k):
    rng = np.random.default_rng(seed)
    X, Z = rng.normal(size=(3, 6)), rng.normal(size=(3, 8))
    w = rng.uniform(0.01, 1, 6)
    hyper = AttentionHyper(gamma=float(rng.uniform(0, 10)), xi=0.2)
    perm = rng.permutation(8)
    for fn in (loss_action_sim, loss_context_diff):
        base = fn(constant(X), constant(Z), constant(w), hyper).item()
        assert abs(fn(constant(X), constant(Z), constant(k * w), hyper).item() - base) <= 1e-12
        assert abs(fn(constant(X), constant(Z[:, perm]), constant(w), hyper).item() - base) <= 1e-12
    e = eta_matrix(constant(X), constant(Z), hyper.gamma).value
    e_perm = eta_matrix(constant(X), constant(Z[:, perm]), hyper.gamma).value
    assert np.allclose(e, e_perm, atol=1e-12, rtol=0)
    lo, hi = Z.min(axis=1, keepdims=True), Z.max(axis=1, keepdims=True)
    assert np.all(e >= lo - 1e-12) and np.all(e <= hi + 1e-12)


def test_loss_gradients_wrt_weights_and_features():
    rng = np.random.default_rng(9)
    X0, Z0 = rng.normal(size=(3, 5)), rng.normal(size=(3, 4))
    s0, c0 = rng.uniform(0.1, 1, 5), rng.uniform(0.1, 1, 5)
    hyper = AttentionHyper(gamma=3.0, xi=0.1)
    X, Z, s = variable(X0), variable(Z0), variable(s0)
    # distinct weights: with shared weights and no clipping, sim + diff is constant
    tc.backward(loss_action_sim(X, Z, s, hyper) + 0.5 * loss_context_diff(X, Z, constant(c0), hyper))

    def f(x, z, w):
        return (loss_action_sim(constant(x), constant(z), constant(w), hyper).item()
                + 0.5 * loss_context_diff(constant(x), constant(z), constant(c0), hyper).item())

    assert tc.max_rel_error(X.grad, tc.finite_diff_grad(lambda v: f(v, Z0, s0), X0)) <= 1e-5
    assert tc.max_rel_error(Z.grad, tc.finite_diff_grad(lambda v: f(X0, v, s0), Z0)) <= 1e-5
    assert tc.max_rel_error(s.grad, tc.finite_diff_grad(lambda v: f(X0, Z0, v), s0)) <= 1e-5
