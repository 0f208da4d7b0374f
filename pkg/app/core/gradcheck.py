"""Finite-difference verification of the tape's gradients."""

import logging
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel

from app.core import autodiff as ad
from app.core.autodiff import Tape, Tensor

logger = logging.getLogger(__name__)


class GradCheckReport(BaseModel):
    name: str = "gradient_check"
    max_rel_error: float
    passed: bool
    coordinates: int
    worst_index: Optional[int] = None


def gradient_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5, tol: float = 1e-4,
                   atol: float = 1e-7, name: str = "gradient_check") -> GradCheckReport:
    """Compare backward() against central differences at 64-bit precision.

    Relative error per coordinate is |g - g_fd| / max(|g|, 1e-8); coordinates whose absolute
    discrepancy is below `atol` count as exact (finite-difference round-off floor).
    """
    with ad.precision_scope("float64"):
        x0 = np.array(x, dtype=np.float64)
        tape = Tape()
        xt = tape.leaf(x0)
        out = f(xt)
        if out.taped:
            g = ad.backward(tape, out)[xt].reshape(-1)
        else:
            g = np.zeros(x0.size)
        flat = x0.reshape(-1)
        worst, worst_i = 0.0, None
        for i in range(flat.size):
            plus, minus = flat.copy(), flat.copy()
            plus[i] += step
            minus[i] -= step
            fp = f(Tensor(plus.reshape(x0.shape))).item()
            fm = f(Tensor(minus.reshape(x0.shape))).item()
            fd = (fp - fm) / (2.0 * step)
            diff = abs(g[i] - fd)
            if not np.isfinite(diff):
                worst, worst_i = float("inf"), i
                break
            if diff < atol:
                continue
            rel = diff / max(abs(g[i]), 1e-8)
            if rel > worst:
                worst, worst_i = rel, i
    report = GradCheckReport(name=name, max_rel_error=float(worst), passed=bool(worst < tol),
                             coordinates=int(x0.size), worst_index=worst_i)
    if not report.passed:
        logger.warning(f"gradient check '{name}' failed: max relative error {worst:.3e} at {worst_i}")
    return report


def _spd(rng: np.random.Generator, n: int) -> np.ndarray:
    a = rng.normal(size=(n, n))
    return a @ a.T + n * np.eye(n)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * w).sum()


def op_cases(rng: np.random.Generator) -> List[Tuple[str, Callable[[Tensor], Tensor], np.ndarray]]:
    """One scalar-valued probe per op, each wrapping the op in a random linear functional."""
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    w34, w32, w38 = rng.normal(size=(3, 4)), rng.normal(size=(3, 2)), rng.normal(size=(3, 8))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    s = _spd(rng, 3)
    lower = np.linalg.cholesky(_spd(rng, 3))
    rhs = rng.normal(size=(3, 2))
    img = rng.normal(size=(1, 6, 6, 2))
    kern = rng.normal(size=(3, 3, 2, 2))
    w_img = rng.normal(size=(1, 3, 3, 2))

    def sym_spd(x: Tensor) -> Tensor:
        return x @ ad.transpose(x) + np.eye(x.shape[0]) * x.shape[0]

    return [
        ("add", lambda x: _weighted(x + a, w34), rng.normal(size=(3, 4))),
        ("sub", lambda x: _weighted(a - x, w34), rng.normal(size=(3, 4))),
        ("mul", lambda x: _weighted(x * a, w34), rng.normal(size=(3, 4))),
        ("div", lambda x: _weighted(a / x, w34), pos),
        ("matmul.left", lambda x: _weighted(x @ b, w32), rng.normal(size=(3, 4))),
        ("matmul.right", lambda x: _weighted(a @ x, w32), rng.normal(size=(4, 2))),
        ("transpose", lambda x: _weighted(ad.transpose(x), w34.T), rng.normal(size=(3, 4))),
        ("reshape", lambda x: _weighted(ad.reshape(x, (4, 3)), w34.reshape(4, 3)), rng.normal(size=(3, 4))),
        ("concat", lambda x: _weighted(ad.concat([x, a], axis=1), w38), rng.normal(size=(3, 4))),
        ("slice", lambda x: _weighted(x[1:, ::2], w34[1:, ::2]), rng.normal(size=(3, 4))),
        ("relu", lambda x: _weighted(ad.relu(x), w34), rng.normal(size=(3, 4))),
        ("exp", lambda x: _weighted(ad.exp(x), w34), rng.normal(size=(3, 4))),
        ("log", lambda x: _weighted(ad.log(x), w34), pos),
        ("sqrt", lambda x: _weighted(ad.sqrt(x), w34), pos),
        ("square", lambda x: _weighted(ad.square(x), w34), rng.normal(size=(3, 4))),
        ("sign", lambda x: _weighted(ad.sign(x) * 2.0 + x, w34), rng.normal(size=(3, 4))),
        ("sum", lambda x: (x.sum(axis=0) * w34[0]).sum(), rng.normal(size=(3, 4))),
        ("mean", lambda x: (x.mean(axis=1) * w32[:, 0]).sum(), rng.normal(size=(3, 4))),
        ("softmax", lambda x: _weighted(ad.softmax(x, axis=-1), w34), rng.normal(size=(3, 4))),
        ("logsumexp", lambda x: (ad.logsumexp(x, axis=-1) * w32[:, 0]).sum(), rng.normal(size=(3, 4))),
        ("cholesky", lambda x: _weighted(ad.cholesky(sym_spd(x)), s), rng.normal(size=(3, 3))),
        ("triangular_solve.rhs", lambda x: _weighted(ad.triangular_solve(lower, x), w32), rhs),
        ("triangular_solve.factor",
         lambda x: _weighted(ad.triangular_solve(ad.cholesky(sym_spd(x)), rhs), w32),
         rng.normal(size=(3, 3))),
        ("logdet", lambda x: ad.logdet(sym_spd(x)), rng.normal(size=(3, 3))),
        ("conv2d.input", lambda x: _weighted(ad.conv2d(x, kern, (2, 2)), w_img), img),
        ("conv2d.kernel", lambda x: _weighted(ad.conv2d(img, x, (2, 2)), w_img), kern),
    ]


def run_op_suite(seed: int = 0, tol: float = 1e-4, trials: int = 1) -> Dict[str, GradCheckReport]:
    """Gradient-check every op on `trials` random draws; keeps the worst report per op."""
    rng = np.random.default_rng(seed)
    reports: Dict[str, GradCheckReport] = {}
    for _ in range(trials):
        with ad.precision_scope("float64"):
            cases = op_cases(rng)
        for name, fn, x in cases:
            report = gradient_check(fn, x, tol=tol, name=name)
            if name not in reports or report.max_rel_error > reports[name].max_rel_error:
                reports[name] = report
    return reports
