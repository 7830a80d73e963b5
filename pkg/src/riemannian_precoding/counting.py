"""Complex-multiply accounting.

Every matrix product and small positive-definite solve in the numerical core
goes through the helpers here so that the cost of an iteration can be
measured and compared with the leading-order complexity model. A count is
only recorded while an :class:`OpCounter` is active (``with OpCounter():``);
otherwise the helpers are plain numpy calls.

The count unit is one complex multiply-accumulate: an ``(m, k) @ (k, n)``
product costs ``m * k * n``.
"""

from contextvars import ContextVar

import numpy as np
import scipy.linalg

from .errors import IllConditionedError

_active: ContextVar["OpCounter | None"] = ContextVar("_active_counter", default=None)


class OpCounter:
    """Accumulates complex multiplies and the largest system solved.

    Counters nest: entering a new counter suspends the outer one, so the
    outer count does not include work done inside the inner block.
    """

    def __init__(self):
        self.mults = 0
        self.max_solve_dim = 0
        self.n_solves = 0
        self._token = None

    def __enter__(self):
        self._token = _active.set(self)
        return self

    def __exit__(self, *exc):
        _active.reset(self._token)
        self._token = None
        return False

    def add(self, n):
        self.mults += int(n)


def active_counter():
    return _active.get()


def add_mults(n):
    c = _active.get()
    if c is not None:
        c.add(n)


def mm(a, b):
    """Counted matrix product ``a @ b``."""
    c = _active.get()
    if c is not None:
        c.mults += a.shape[0] * a.shape[1] * b.shape[-1]
    return a @ b


def ctmm(a, b):
    """Counted ``a^H @ b``."""
    c = _active.get()
    if c is not None:
        c.mults += a.shape[1] * a.shape[0] * b.shape[-1]
    return a.conj().T @ b


def cho_factor(a, what="matrix"):
    """Cholesky factor of a Hermitian PD matrix; raises with a condition estimate on failure."""
    n = a.shape[0]
    c = _active.get()
    if c is not None:
        c.mults += n**3 // 6
        c.max_solve_dim = max(c.max_solve_dim, n)
    try:
        return scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise IllConditionedError(
            f"{what} is not numerically positive definite", np.linalg.cond(a)
        ) from None


def cho_solve(factor, b):
    n = factor[0].shape[0]
    c = _active.get()
    if c is not None:
        c.mults += n * n * (b.shape[1] if b.ndim > 1 else 1)
        c.n_solves += 1
    return scipy.linalg.cho_solve(factor, b, check_finite=False)


def pd_solve(a, b, what="matrix"):
    """Solve ``a x = b`` for Hermitian PD ``a`` via Cholesky."""
    return cho_solve(cho_factor(a, what), b)


def logdet_from_factor(factor):
    return 2.0 * float(np.sum(np.log(np.abs(np.diag(factor[0])))))


def pd_logdet(a, what="matrix"):
    return logdet_from_factor(cho_factor(a, what))
