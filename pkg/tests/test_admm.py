import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import minimize

from conftest import crandn
from dynmri.admm import (NumericalAbort, ReconContext, Weights, data_consistent, dual_update, soft,
                         v_update, write_diagnostics, x_update, x_update_weighted,
                         reconstruct_frame, DIAG_FIELDS)
from dynmri.dictlearn import HyperParams, init_state
from dynmri.grouping import DependenceMatrix, PatchGrouping
from dynmri.linops import SupportSet, apply_fu, dwt2, fft2c, idwt2
from dynmri.sampling import measure, radial_mask


def prox_oracle(c, kappa):
    # polar form of argmin_v kappa |v| + |v - c|^2 / 2
    return np.maximum(np.abs(c) - kappa, 0.0) * np.exp(1j * np.angle(c))


def ctx_for(side, weights, levels=1, support=None, rng=None):
    support = SupportSet.empty(side) if support is None else support
    ctx = ReconContext(support, weights, levels)
    if rng is not None:
        ctx.v = crandn(rng, side, side)
        ctx.u = np.where(support.mask, 0, 0.3 * crandn(rng, side, side))
    return ctx


def test_soft_examples():
    assert soft(np.array([3.0]), 1.0)[0] == 2.0
    assert soft(np.array([-0.5]), 1.0)[0] == 0.0
    c = np.array([3 + 4j, 0.0])
    assert np.allclose(soft(c, 0.0), c)


def test_scalar_prox_by_numerical_minimisation(rng):
    for c in crandn(rng, 5):
        obj = lambda z: 0.7 * np.hypot(*z) + 0.5 * ((z[0] - c.real) ** 2 + (z[1] - c.imag) ** 2)
        best = minimize(obj, [c.real, c.imag], method="Nelder-Mead",
                        options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000}).x
        v = soft(np.array([c]), 0.7)[0]
        assert abs(v - complex(*best)) < 1e-5


@given(st.integers(0, 2**32 - 1))
def test_v_update_matches_prox_oracle(seed):
    rng = np.random.default_rng(seed)
    support = SupportSet(rng.random((8, 8)) < 0.3, 0.0)
    ctx = ctx_for(8, Weights(lambda_g=15.0, rho=20.0), support=support, rng=rng)
    x = crandn(rng, 8, 8)
    c = dwt2(x, 1) + ctx.u
    v = v_update(ctx, x)
    expected = np.where(support.mask, c, prox_oracle(c, 15.0 / 20.0))
    assert np.max(np.abs(v - expected)) <= 1e-12


def test_zero_shrinkage_passes_through(rng):
    ctx = ctx_for(8, Weights(lambda_g=0.0, rho=1.0), rng=rng)
    x = crandn(rng, 8, 8)
    assert np.allclose(v_update(ctx, x), dwt2(x, 1) + ctx.u, atol=1e-14)


def dense_operators(side, levels=1):
    n = side * side
    basis = np.eye(n)
    F = np.stack([fft2c(basis[k].reshape(side, side)).ravel() for k in range(n)], axis=1)
    W = np.stack([dwt2(basis[k].reshape(side, side), levels).ravel() for k in range(n)], axis=1)
    return F, W


def dense_solve(weight_diag, synth, ctx, y, F, W):
    w = ctx.weights
    Fu = F[y.mask.bits.ravel()]
    A = np.diag(weight_diag.ravel()) + w.rho * W.T @ W + w.lam * Fu.conj().T @ Fu
    b = synth.ravel() + w.lam * Fu.conj().T @ y.values + w.rho * W.T @ (ctx.v - ctx.u).ravel()
    return np.linalg.solve(A, b).reshape(y.mask.bits.shape)


def dense_solve_noiseless(weight_diag, synth, ctx, y, F, W):
    n = synth.size
    M = y.mask.bits.ravel()
    Fh = F.conj().T
    x_fixed = Fh[:, M] @ y.values
    Pc = Fh[:, ~M]
    A = np.diag(weight_diag.ravel()) + ctx.weights.rho * np.eye(n)
    b = synth.ravel() + ctx.weights.rho * W.T @ (ctx.v - ctx.u).ravel()
    z = np.linalg.solve(Pc.conj().T @ A @ Pc, Pc.conj().T @ (b - A @ x_fixed))
    return (x_fixed + Pc @ z).reshape(y.mask.bits.shape)


@pytest.fixture(scope="module")
def dense8():
    return dense_operators(8)


@pytest.mark.parametrize("lam", [1.0, 1e3, 1e6])
def test_x_update_matches_dense_normal_equations(rng, dense8, lam):
    F, W = dense8
    y = measure(crandn(rng, 8, 8), radial_mask(8, 3))
    ctx = ctx_for(8, Weights(10.0, 50.0, lam), rng=rng)
    code = crandn(rng, 8, 8)
    x = x_update(ctx, code, y, 7.0, 4)
    expected = dense_solve(np.full((8, 8), 28.0), 7.0 * code, ctx, y, F, W)
    assert np.linalg.norm(x - expected) <= 1e-8 * np.linalg.norm(expected)


@pytest.mark.parametrize("lam", [1.0, 1e3, 1e6])
def test_weighted_x_update_matches_dense_normal_equations(rng, dense8, lam):
    F, W = dense8
    y = measure(crandn(rng, 8, 8), radial_mask(8, 3))
    ctx = ctx_for(8, Weights(10.0, 50.0, lam), rng=rng)
    synth, weight = crandn(rng, 8, 8), rng.uniform(5.0, 500.0, (8, 8))
    x = x_update_weighted(ctx, synth, weight, y)
    expected = dense_solve(weight, synth, ctx, y, F, W)
    assert np.linalg.norm(x - expected) <= 1e-8 * np.linalg.norm(expected)


def test_noiseless_x_updates_match_dense_constrained_solve(rng, dense8):
    F, W = dense8
    y = measure(crandn(rng, 8, 8), radial_mask(8, 2))
    ctx = ctx_for(8, Weights(10.0, 50.0, noiseless=True), rng=rng)
    synth, weight = crandn(rng, 8, 8), rng.uniform(5.0, 500.0, (8, 8))
    for x, wd, s in [(x_update_weighted(ctx, synth, weight, y), weight, synth),
                     (x_update(ctx, synth, y, 3.0, 4), np.full((8, 8), 12.0), 3.0 * synth)]:
        expected = dense_solve_noiseless(wd, s, ctx, y, F, W)
        assert np.linalg.norm(x - expected) <= 1e-8 * np.linalg.norm(expected)
        assert np.linalg.norm(apply_fu(x, y.mask) - y.values) <= 1e-8 * np.linalg.norm(y.values)


def test_constant_weight_reduces_to_closed_form(rng):
    y = measure(crandn(rng, 16, 16), radial_mask(16, 4))
    ctx = ctx_for(16, Weights(), rng=rng)
    code = crandn(rng, 16, 16)
    a = x_update(ctx, code, y, 2.5, 16)
    b = x_update_weighted(ctx, 2.5 * code, np.full((16, 16), 40.0), y)
    assert np.allclose(a, b, atol=1e-12)


def test_normal_equation_residual_is_tiny(rng):
    y = measure(crandn(rng, 16, 16), radial_mask(16, 4))
    ctx = ctx_for(16, Weights(10.0, 1000.0, 1e4), levels=2, rng=rng)
    synth, weight = crandn(rng, 16, 16), rng.uniform(100.0, 3e4, (16, 16))
    x = x_update_weighted(ctx, synth, weight, y)
    w = ctx.weights
    from dynmri.linops import apply_fu_adjoint
    lhs = weight * x + w.rho * x + w.lam * apply_fu_adjoint(apply_fu(x, y.mask), y.mask)
    rhs = synth + w.lam * apply_fu_adjoint(y.values, y.mask) + w.rho * idwt2(ctx.v - ctx.u, 2)
    assert np.linalg.norm(lhs - rhs) <= 1e-10 * np.linalg.norm(rhs)


def test_dominant_rho_limit(rng):
    y = measure(crandn(rng, 16, 16), radial_mask(16, 4))
    ctx = ctx_for(16, Weights(10.0, 1e6, 1.0), levels=2, rng=rng)
    x = x_update(ctx, crandn(rng, 16, 16), y, 1.0 / 16, 16)
    target = idwt2(ctx.v - ctx.u, 2)
    assert np.linalg.norm(x - target) <= 0.01 * np.linalg.norm(target)


def test_data_consistent_replaces_samples(rng):
    y = measure(crandn(rng, 16, 16), radial_mask(16, 3))
    img = crandn(rng, 16, 16)
    out = data_consistent(img, y, Weights(noiseless=True))
    assert np.allclose(apply_fu(out, y.mask), y.values, atol=1e-12)
    unsampled = ~y.mask.bits
    assert np.allclose(fft2c(out)[unsampled], fft2c(img)[unsampled])


def test_dual_update_definition_and_support(rng):
    support = SupportSet(rng.random((8, 8)) < 0.4, 0.0)
    ctx = ctx_for(8, Weights(5.0, 10.0), support=support, rng=rng)
    u_prev = ctx.u.copy()
    x = crandn(rng, 8, 8)
    u = dual_update(ctx, x)
    expected = np.where(support.mask, 0, u_prev + dwt2(x, 1) - ctx.v)
    assert np.allclose(u, expected)
    zero = ctx_for(8, Weights())
    assert not dual_update(zero, np.zeros((8, 8))).any()


@given(st.integers(0, 2**32 - 1))
def test_dual_stays_zero_on_support_over_iterations(seed):
    rng = np.random.default_rng(seed)
    support = SupportSet(rng.random((8, 8)) < 0.4, 0.0)
    ctx = ctx_for(8, Weights(5.0, 10.0), support=support)
    x = crandn(rng, 8, 8)
    for _ in range(10):
        v_update(ctx, x)
        dual_update(ctx, x)
        assert not ctx.u[support.mask].any()
        x = x + 0.1 * crandn(rng, 8, 8)


def tiny_model(side, L=4, K=8, seed=0):
    n = side * side
    grouping = PatchGrouping(np.zeros(n, dtype=np.int64), np.zeros((1, 2 * L)))
    state = init_state(grouping, 2 * L, DependenceMatrix.identity(grouping), K=K,
                       hyper=HyperParams(eta0=0.1), seed=seed)
    return grouping, state


def test_fully_sampled_noiseless_frame_is_exact(rng):
    truth = rng.random((16, 16))
    y = measure(truth, radial_mask(16, 1000))
    assert y.mask.rate == 1.0
    grouping, state = tiny_model(16)
    ctx = ReconContext(SupportSet.empty(16), Weights(noiseless=True), max_iters=5)
    x, _, rows = reconstruct_frame(y, grouping, state, ctx, 4, truth=truth)
    assert rows[-1]["psnr"] >= 80
    assert len(rows) <= 5


def test_diagnostics_rows_and_csv(tmp_path, rng):
    truth = rng.random((16, 16))
    y = measure(truth, radial_mask(16, 6))
    grouping, state = tiny_model(16)
    ctx = ReconContext(SupportSet.empty(16), Weights(noiseless=True), max_iters=3)
    seen = []
    x, _, rows = reconstruct_frame(y, grouping, state, ctx, 4, truth=truth, callback=seen.append)
    assert len(rows) == 3 and seen == rows
    for r in rows:
        assert r["data_consistency"] <= 1e-8
        assert set(DIAG_FIELDS) - {"frame"} <= set(r)
    write_diagnostics(tmp_path / "d.csv", [dict(r, frame=1) for r in rows])
    write_diagnostics(tmp_path / "d.csv", [dict(r, frame=2) for r in rows], append=True)
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0].split(",") == list(DIAG_FIELDS) and len(lines) == 7


def test_non_finite_iterate_aborts(rng):
    y = measure(rng.random((16, 16)), radial_mask(16, 6))
    grouping, state = tiny_model(16)
    ctx = ReconContext(SupportSet.empty(16), Weights(noiseless=True), max_iters=3)
    bad = np.full((16, 16), np.nan)
    with pytest.raises(NumericalAbort):
        reconstruct_frame(y, grouping, state, ctx, 4, x0=bad)


def test_invalid_weights_and_context():
    with pytest.raises(ValueError):
        Weights(rho=0.0)
    with pytest.raises(ValueError):
        Weights(lambda_g=-1.0)
    with pytest.raises(ValueError):
        ReconContext(SupportSet.empty(8), v=np.zeros((4, 4)))
