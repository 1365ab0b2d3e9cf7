"""Harmonic polynomials with closed-form gradients, Hessians and their sups."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["HarmonicPolynomial", "harmonic_polynomial", "HARMONIC_IDS"]


@dataclass(frozen=True)
class HarmonicPolynomial:
    """Harmonic polynomial in ``d`` variables.

    ``grad_sup`` and ``hess_sup`` give the sups of ``|grad h|`` and of the
    Hessian's operator norm over a box.  Every polynomial here has both
    quantities nondecreasing in each ``|x_i|``, so the sup over a box is
    attained at the corner maximizing every ``|x_i|``.
    """

    ident: str
    d: int
    _value: Callable
    _grad: Callable
    _hess: Callable

    def __call__(self, x):
        return self._value(np.atleast_2d(np.asarray(x, dtype=float)))

    def grad(self, x):
        return self._grad(np.atleast_2d(np.asarray(x, dtype=float)))

    def hess(self, x):
        return self._hess(np.atleast_2d(np.asarray(x, dtype=float)))

    @staticmethod
    def _corner(box):
        return np.maximum(np.abs(box.lo_arr), np.abs(box.hi_arr))[None, :]

    def grad_sup(self, box):
        return float(np.linalg.norm(self.grad(self._corner(box))[0]))

    def hess_sup(self, box):
        return float(np.abs(np.linalg.eigvalsh(self.hess(self._corner(box))[0])).max())


def _zeros_h(d):
    return lambda x: np.zeros((len(x), d, d))


def harmonic_polynomial(ident, d):
    """Look up a harmonic polynomial by id.

    Ids: ``"x1^2-x2^2"``, ``"x1x2"``, ``"re_z3"`` (``x1^3 - 3 x1 x2^2``),
    ``"x1x2x3"`` (``d >= 3``), ``"x1"`` and ``"const"``.
    """
    if d < 2:
        raise ValueError("d must be at least 2")

    if ident == "x1^2-x2^2":
        def val(x):
            return x[:, 0] ** 2 - x[:, 1] ** 2

        def grad(x):
            g = np.zeros_like(x)
            g[:, 0] = 2 * x[:, 0]
            g[:, 1] = -2 * x[:, 1]
            return g

        def hess(x):
            h = np.zeros((len(x), d, d))
            h[:, 0, 0] = 2.0
            h[:, 1, 1] = -2.0
            return h
    elif ident == "x1x2":
        def val(x):
            return x[:, 0] * x[:, 1]

        def grad(x):
            g = np.zeros_like(x)
            g[:, 0] = x[:, 1]
            g[:, 1] = x[:, 0]
            return g

        def hess(x):
            h = np.zeros((len(x), d, d))
            h[:, 0, 1] = h[:, 1, 0] = 1.0
            return h
    elif ident == "re_z3":
        def val(x):
            return x[:, 0] ** 3 - 3 * x[:, 0] * x[:, 1] ** 2

        def grad(x):
            g = np.zeros_like(x)
            g[:, 0] = 3 * x[:, 0] ** 2 - 3 * x[:, 1] ** 2
            g[:, 1] = -6 * x[:, 0] * x[:, 1]
            return g

        def hess(x):
            h = np.zeros((len(x), d, d))
            h[:, 0, 0] = 6 * x[:, 0]
            h[:, 1, 1] = -6 * x[:, 0]
            h[:, 0, 1] = h[:, 1, 0] = -6 * x[:, 1]
            return h
    elif ident == "x1x2x3":
        if d < 3:
            raise ValueError("x1x2x3 needs d >= 3")

        def val(x):
            return x[:, 0] * x[:, 1] * x[:, 2]

        def grad(x):
            g = np.zeros_like(x)
            g[:, 0] = x[:, 1] * x[:, 2]
            g[:, 1] = x[:, 0] * x[:, 2]
            g[:, 2] = x[:, 0] * x[:, 1]
            return g

        def hess(x):
            h = np.zeros((len(x), d, d))
            h[:, 0, 1] = h[:, 1, 0] = x[:, 2]
            h[:, 0, 2] = h[:, 2, 0] = x[:, 1]
            h[:, 1, 2] = h[:, 2, 1] = x[:, 0]
            return h
    elif ident == "x1":
        def val(x):
            return x[:, 0].copy()

        def grad(x):
            g = np.zeros_like(x)
            g[:, 0] = 1.0
            return g

        hess = _zeros_h(d)
    elif ident == "const":
        def val(x):
            return np.ones(len(x))

        def grad(x):
            return np.zeros_like(x)

        hess = _zeros_h(d)
    else:
        raise KeyError(f"unknown harmonic function id {ident!r}")
    return HarmonicPolynomial(ident, d, val, grad, hess)


HARMONIC_IDS = ("x1^2-x2^2", "x1x2", "re_z3", "x1x2x3", "x1", "const")
