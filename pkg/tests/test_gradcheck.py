import numpy as np

from app.core import autodiff as ad
from app.core.gaussian import GaussianBelief, gaussian_nll
from app.core.gradcheck import gradient_check, op_cases, run_op_suite


def test_every_op_passes_gradient_check():
    reports = run_op_suite(seed=0, tol=1e-4)
    failed = {name: r.max_rel_error for name, r in reports.items() if not r.passed}
    assert not failed
    assert {"cholesky", "triangular_solve.factor", "logdet", "conv2d.kernel", "softmax"} <= set(reports)


def test_constant_function_has_zero_error():
    report = gradient_check(lambda x: ad.constant(3.0), np.ones(4))
    assert report.passed
    assert report.max_rel_error == 0.0


def test_wrong_gradient_is_detected():
    """x * stop_gradient(x) has backward x, but the true derivative is 2x."""
    report = gradient_check(lambda x: (x * ad.stop_gradient(x)).sum(), np.array([1.0, 2.0, -3.0]))
    assert not report.passed
    assert report.max_rel_error > 0.5


def test_gaussian_nll_gradient_wrt_mean_and_factor():
    """NLL of a fixed point under N(mu, L L^T + I), parameters packed as (mu, L)."""
    x = np.array([0.3, -1.2])

    def nll(theta):
        mu = theta[0:2]
        l = ad.reshape(theta[2:6], (2, 2))
        cov = ad.matmul(l, ad.transpose(l)) + np.eye(2)
        return gaussian_nll(x, GaussianBelief(mu, cov))

    theta = np.array([0.1, 0.4, 1.0, 0.2, -0.3, 0.8])
    assert gradient_check(nll, theta, tol=1e-4).passed


def test_op_cases_are_fixed_functions():
    """Evaluating a case twice at the same point gives the same value."""
    with ad.precision_scope("float64"):
        cases = op_cases(np.random.default_rng(0))
    for name, fn, x in cases:
        first, second = fn(ad.constant(x)).item(), fn(ad.constant(x)).item()
        assert first == second, name


def test_concat_case_passes():
    assert run_op_suite(seed=3, tol=1e-4)["concat"].passed
