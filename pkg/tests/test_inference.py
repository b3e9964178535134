import math

import numpy as np
import pytest
import hypothesis.strategies as st
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays

from c2hm.autodiff import ContractError
from c2hm.experiments import CurseConfig, linear_generative_model
from c2hm.inference import (
    DeltaConfig,
    DivergenceError,
    InferenceTrace,
    TraceRecord,
    affine_operator,
    amortized_cycle_step,
    collapse_ratio,
    delta_convergence_run,
    entropy_descent_check,
    estimate_gamma,
    half_cycle_step,
    non_increasing_fraction,
    run_to_fixed_point,
)
from c2hm.rng import SeededRng

vec = arrays(np.float64, 4, elements=st.floats(-2, 2))


@pytest.fixture
def linear():
    """Depth-0 simulator and decoder: psi_hat = M phi + c in closed form."""
    p = linear_generative_model(CurseConfig(D=12, d=4, k=6), seed=3)
    ws, bs = p.sim.layers[0].weight[:6], p.sim.layers[0].bias[:6]
    wd, bd = p.dec.layers[0].weight, p.dec.layers[0].bias
    return p, wd @ ws, wd @ bs + bd


def trace_of(values):
    return InferenceTrace([TraceRecord(np.zeros(1), 0.0, entropy_proxy=v) for v in values])


@settings(max_examples=30, deadline=None)
@given(vec, st.floats(0.0, 0.5))
def test_gradient_step_matches_normal_equations(phi, eta):
    p = linear_generative_model(CurseConfig(D=12, d=4, k=6), seed=3)
    ws, bs = p.sim.layers[0].weight[:6], p.sim.layers[0].bias[:6]
    M = p.dec.layers[0].weight @ ws
    c = p.dec.layers[0].weight @ bs + p.dec.layers[0].bias
    psi = SeededRng(1).standard_normal(12)
    grad = -2.0 * M.T @ (psi - M @ phi - c)
    np.testing.assert_allclose(half_cycle_step(p, phi, psi, eta), phi - eta * grad, atol=1e-8, rtol=0)


def test_zero_residual_is_stationary(linear):
    p, M, c = linear
    phi = np.array([0.5, -1.0, 0.2, 0.0])
    psi = M @ phi + c
    np.testing.assert_allclose(half_cycle_step(p, phi, psi, 0.1), phi, atol=1e-12)


def test_eta_zero_identity_and_contracts(linear):
    p, _, _ = linear
    phi = np.ones(4)
    np.testing.assert_array_equal(half_cycle_step(p, phi, np.zeros(12), 0.0), phi)
    with pytest.raises(ContractError):
        half_cycle_step(p, phi, np.zeros(12), -0.1)
    with pytest.raises(ContractError):
        half_cycle_step(p, phi, np.zeros(11), 0.1)


def test_backtracking_never_increases_error(linear):
    p, M, c = linear
    psi = SeededRng(2).standard_normal(12)
    phi = np.zeros(4)
    err = lambda x: float(np.sum((psi - M @ x - c) ** 2))  # noqa: E731
    nxt = half_cycle_step(p, phi, psi, eta=50.0, backtrack=30)
    assert err(nxt) <= err(phi)


def test_batched_step_matches_rows(linear):
    p, _, _ = linear
    phis = SeededRng(3).standard_normal((3, 4))
    psis = SeededRng(4).standard_normal((3, 12))
    batched = half_cycle_step(p, phis, psis, 0.05)
    rows = np.stack([half_cycle_step(p, phis[i], psis[i], 0.05) for i in range(3)])
    np.testing.assert_allclose(batched, rows, atol=1e-12)


def test_affine_fixed_point():
    c = np.array([1.0, -2.0, 0.5])
    F, fixed = affine_operator(0.5, c)
    np.testing.assert_allclose(fixed, 2 * c)
    report, trace = run_to_fixed_point(None, np.zeros(3), None, F, tol=1e-10)
    assert report.converged
    np.testing.assert_allclose(report.final_phi, 2 * c, atol=1e-9)
    assert abs(report.estimated_gamma - 0.5) <= 0.05


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 0.95), st.integers(0, 1000))
def test_contraction_envelope_property(gamma, seed):
    rng = SeededRng(seed)
    R, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    F, fixed = affine_operator(gamma, rng.standard_normal(5), R)
    phi0 = 3 * rng.standard_normal(5)
    report, trace = run_to_fixed_point(None, phi0, None, F, tol=1e-9, max_iter=2000)
    errs = np.array([np.linalg.norm(r.phi - fixed) for r in trace.iterations])
    bound = gamma ** np.arange(1, len(errs) + 1) * np.linalg.norm(phi0 - fixed) * 1.05
    assert np.all(errs <= bound + 1e-12)
    assert abs(report.estimated_gamma - gamma) <= 0.05


def test_max_iter_one_records_one():
    F, _ = affine_operator(0.9, np.ones(2))
    report, trace = run_to_fixed_point(None, np.zeros(2), None, F, max_iter=1)
    assert len(trace) == 1 and report.iterations_used == 1 and not report.converged
    assert math.isnan(report.estimated_gamma)


def test_divergence_raises_with_trace():
    with pytest.raises(DivergenceError) as info:
        run_to_fixed_point(None, np.ones(2), None, lambda phi: 10.0 * phi + 1.0, max_iter=100)
    assert len(info.value.trace) >= 1


def test_run_contracts():
    with pytest.raises(ContractError):
        run_to_fixed_point(None, np.zeros(2), None, lambda x: x, tol=0.0)
    with pytest.raises(ContractError):
        run_to_fixed_point(None, np.zeros(2), None, "newton")


def test_entropy_descent_rules():
    assert entropy_descent_check(trace_of([5.0, 4.0, 3.0, 1.0])) == 1.0
    assert entropy_descent_check(trace_of([2.0, 2.0, 2.0])) == 1.0
    assert entropy_descent_check(trace_of([1.0, 2.0, 1.0])) == 0.5
    with pytest.raises(ContractError):
        entropy_descent_check(trace_of([1.0]))


def test_estimate_gamma_tail_and_exact_hit():
    tr = InferenceTrace([TraceRecord(np.zeros(1), n) for n in (8.0, 4.0, 2.0, 1.0)])
    assert estimate_gamma(tr) == 0.5
    tr = InferenceTrace([TraceRecord(np.zeros(1), n) for n in (0.0, 0.0)])
    assert estimate_gamma(tr) == 0.0


def test_trace_csv_layout():
    tr = trace_of([1.0, 0.5])
    lines = tr.to_csv().splitlines()
    assert lines[0] == "# schema: trace-v1"
    assert lines[1] == "iter,step_norm,entropy_proxy,vb_value,latent_var_mean"
    assert len(lines) == 4


def test_amortized_step_untrained(tiny_params):
    phi = np.array([0.2, -0.1, 0.4])
    psi = np.full(6, 0.5)
    a = amortized_cycle_step(tiny_params, phi, psi)
    assert a.shape == (3,) and np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, amortized_cycle_step(tiny_params, phi, psi))
    with pytest.raises(ContractError):
        amortized_cycle_step(tiny_params, phi, psi, anchor=1.5)


def test_trained_fixed_point_is_stationary(trained, mnist):
    _, params, _ = trained
    psi = mnist[1].images[0]
    report, _ = run_to_fixed_point(params, np.zeros(params.d), psi, "amortized", tol=1e-9, max_iter=500)
    assert report.converged
    step = np.linalg.norm(amortized_cycle_step(params, report.final_phi, psi) - report.final_phi)
    assert step < 1e-5


def test_trained_model_converges_quickly(trained, mnist):
    _, params, _ = trained
    for psi in mnist[1].images[:5]:
        report, _ = run_to_fixed_point(params, np.zeros(params.d), psi, "amortized", tol=1e-5, max_iter=200)
        assert report.converged


def test_trained_gradient_trace_descends(trained, mnist):
    _, params, _ = trained
    _, trace = run_to_fixed_point(params, np.zeros(params.d), mnist[1].images[1], "gradient", max_iter=60)
    assert entropy_descent_check(trace) >= 0.95


def test_non_increasing_fraction_and_ratio():
    assert non_increasing_fraction(np.r_[np.ones(10) * 9, [3.0, 2.0, 2.0, 1.0]]) == 1.0
    assert non_increasing_fraction([0, 1, 0, 1], burn_in=0) == pytest.approx(1 / 3)
    with pytest.raises(ContractError):
        non_increasing_fraction([1.0, 2.0], burn_in=10)
    tr = InferenceTrace([TraceRecord(np.zeros(1), 0.0, latent_var_mean=v) for v in (2.0, 1.0, 0.5)])
    assert collapse_ratio(tr) == 0.25


def test_delta_run_short_is_deterministic_and_floored():
    cfg = DeltaConfig(beta=1.0, iterations=40)
    a = delta_convergence_run(cfg, SeededRng(0))
    b = delta_convergence_run(cfg, SeededRng(0))
    assert a.to_csv() == b.to_csv()
    var = a.column("latent_var_mean")
    assert np.all(var >= math.exp(-10))
    assert var[-1] < var[0]
