import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from app.core import autodiff as ad
from app.core.autodiff import Tape, Tensor
from app.core.errors import ContractError, NumericError, ShapeError
from app.models.process import disc_process_analytic, disc_process_jacobian

SIGMA = np.array([[4.0, 2.0], [2.0, 5.0]])


def test_matmul_identity():
    """Multiplying by the identity returns the input."""
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(a, np.eye(2)).data, a)


def test_cholesky_known_factor():
    l = ad.cholesky(SIGMA).data
    np.testing.assert_allclose(l, [[2.0, 0.0], [1.0, 2.0]])
    np.testing.assert_allclose(l @ l.T, SIGMA)


def test_logdet_known_value():
    assert ad.logdet(SIGMA).item() == pytest.approx(np.log(16.0))


def test_backward_sum_gives_ones():
    tape = Tape()
    x = tape.leaf(np.arange(6.0).reshape(2, 3))
    grads = ad.backward(tape, x.sum())
    np.testing.assert_array_equal(grads[x], np.ones((2, 3)))


def test_backward_product_rule():
    tape = Tape()
    x, y = tape.leaf(3.0), tape.leaf(5.0)
    grads = ad.backward(tape, x * y)
    assert float(grads[x]) == 5.0
    assert float(grads[y]) == 3.0


def test_logdet_gradient_is_inverse():
    """d logdet(S) / dS is the (symmetrized) inverse."""
    tape = Tape()
    s = tape.leaf(SIGMA)
    grads = ad.backward(tape, ad.logdet(s))
    np.testing.assert_allclose(grads[s], np.linalg.inv(SIGMA), atol=1e-12)


def test_untouched_leaf_gets_zero_gradient():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    unused = tape.leaf(np.ones((2, 2)))
    grads = ad.backward(tape, ad.square(x).sum())
    np.testing.assert_array_equal(grads[unused], np.zeros((2, 2)))
    np.testing.assert_array_equal(grads[x], 2.0 * np.ones(3))


def test_backward_rejects_non_scalar_loss():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ContractError):
        ad.backward(tape, x * 2.0)


def test_backward_rejects_loss_from_other_tape():
    tape, other = Tape(), Tape()
    x = other.leaf(np.ones(2))
    with pytest.raises(ContractError):
        ad.backward(tape, x.sum())


def test_cholesky_reports_failing_minor():
    """A matrix whose second leading minor is negative."""
    with pytest.raises(NumericError) as info:
        ad.cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert info.value.minor_index == 2
    assert "dfkit-error[NUMERIC]" in info.value.line()


def test_cholesky_rejects_non_finite():
    with pytest.raises(NumericError):
        ad.cholesky(np.array([[np.nan, 0.0], [0.0, 1.0]]))


def test_shape_mismatch_raises_shape_error():
    with pytest.raises(ShapeError):
        ad.add(np.ones((2, 3)), np.ones(4))
    with pytest.raises(ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        ad.reshape(np.ones(5), (2, 3))


def test_mixing_tapes_is_a_contract_error():
    a, b = Tape().leaf(1.0), Tape().leaf(2.0)
    with pytest.raises(ContractError):
        a + b


def test_tape_is_confined_to_its_thread():
    tape = Tape()
    with ThreadPoolExecutor(max_workers=1) as pool:
        future = pool.submit(tape.leaf, 1.0)
        with pytest.raises(ContractError):
            future.result()


def test_sign_blocks_gradients():
    """sum(sign(x) * x) = sum|x| has gradient sign(x); sign itself contributes nothing."""
    tape = Tape()
    x = tape.leaf(np.array([-2.0, 0.5, 3.0]))
    grads = ad.backward(tape, (ad.sign(x) * x).sum())
    np.testing.assert_array_equal(grads[x], [-1.0, 1.0, 1.0])
    assert not ad.sign(x).taped


def test_slice_gradient_scatters_back():
    tape = Tape()
    x = tape.leaf(np.arange(12.0).reshape(3, 4))
    grads = ad.backward(tape, x[1:, ::2].sum())
    expected = np.zeros((3, 4))
    expected[1:, ::2] = 1.0
    np.testing.assert_array_equal(grads[x], expected)


def test_softmax_rows_are_distributions():
    out = ad.softmax(np.random.default_rng(1).normal(size=(3, 5)), axis=-1).data
    np.testing.assert_allclose(out.sum(axis=1), np.ones(3))
    assert np.all(out > 0)


def test_solve_spd_matches_numpy():
    b = np.array([1.0, -2.0])
    np.testing.assert_allclose(ad.solve_spd(SIGMA, b).data, np.linalg.solve(SIGMA, b))


def test_jacobian_of_linear_map():
    a = np.random.default_rng(2).normal(size=(3, 4))
    jac = ad.jacobian(lambda x: ad.matmul(a, x), np.ones(4))
    np.testing.assert_allclose(jac, a)


def test_jacobian_of_identity():
    np.testing.assert_array_equal(ad.jacobian(lambda x: x * 1.0, np.zeros(3)), np.eye(3))


def test_jacobian_of_disc_dynamics():
    """dv'_x/dp_x = -f_pull, matching the hand-derived Jacobian."""
    x = np.array([10.0, 0.0, 2.0, 0.0])
    jac = ad.jacobian(disc_process_analytic, x)
    assert jac[2, 0] == pytest.approx(-0.05)
    np.testing.assert_allclose(jac, disc_process_jacobian(x), atol=1e-12)


def test_forward_mode_jacobian_matches_reverse():
    x = np.array([3.0, -1.0, 1.5, -0.5])
    reverse = ad.jacobian(disc_process_analytic, x)
    forward = ad.jacobian(disc_process_analytic, x, create_graph=True)
    assert isinstance(forward, Tensor)
    np.testing.assert_allclose(forward.data, reverse, atol=1e-12)


def test_linearized_jacobian_is_differentiable():
    """The Jacobian from linearize carries gradients into the weights it closes over."""
    tape = Tape()
    w = tape.leaf(np.array([[2.0, 0.0], [1.0, 3.0]]))
    _, jac = ad.linearize(lambda x: ad.matmul(w, x), Tensor(np.ones(2)))
    np.testing.assert_allclose(jac.data, w.data)
    grads = ad.backward(tape, jac.sum())
    np.testing.assert_allclose(grads[w], np.ones((2, 2)))


def test_jacobian_non_finite_raises():
    with pytest.raises(NumericError):
        ad.jacobian(lambda x: ad.log(x), np.array([0.0, 1.0]))


def test_precision_scope_restores_previous_dtype():
    ad.set_precision("float32")
    with ad.precision_scope("float64"):
        assert Tensor(1.0).data.dtype == np.float64
    assert ad.default_dtype() == np.float32
    with pytest.raises(ContractError):
        ad.set_precision("float16")


def test_precision_scopes_are_independent_across_threads():
    """Two jobs holding different precision scopes at the same time each keep their dtype."""
    both_inside = threading.Barrier(2, timeout=10)
    seen = {}

    def job(name):
        with ad.precision_scope(name):
            both_inside.wait()
            tape = Tape()
            x = tape.leaf(np.ones(3))
            y = ad.reduce_sum(ad.exp(x) * 2.0)
            both_inside.wait()
            grads = ad.backward(tape, y)
            seen[name] = (x.data.dtype, y.data.dtype, ad.constant(0.5).data.dtype, grads[x].dtype)

    with ThreadPoolExecutor(max_workers=2) as pool:
        for f in [pool.submit(job, "float32"), pool.submit(job, "float64")]:
            f.result()
    assert all(dt == np.float32 for dt in seen["float32"])
    assert all(dt == np.float64 for dt in seen["float64"])
    assert ad.default_dtype() == np.float64


def test_submit_in_context_carries_the_precision_scope():
    with ThreadPoolExecutor(max_workers=1) as pool:
        with ad.precision_scope("float32"):
            scoped = ad.submit_in_context(pool, lambda: ad.constant(1.0).data.dtype).result()
        plain = pool.submit(lambda: ad.constant(1.0).data.dtype).result()
    assert scoped == np.float32
    assert plain == np.float64
