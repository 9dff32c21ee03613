"""Critical-path-length models for RINCH and LIF.

Both algorithms satisfy a recursion ``Psi(N) = P(N) + Q * Psi(N/2)`` with
``Psi(1) = 1``, where ``P(N)`` collects the non-recursive work on one level.
``P`` is either a quadratic in ``log2 N`` given by coefficients ``c1, c2, c3``
or is built from a matrix-multiply model ``xi(N)``.

The recursions are the reference; closed forms are checked against them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Literal

import numpy as np

__all__ = [
    "CplModel",
    "cpl_recursion",
    "fit_log_polynomial",
    "lif_coefficients",
    "lif_cpl",
    "log2_exact",
    "rinch_coefficients",
    "rinch_cpl",
    "xi_poly",
]

Form = Literal["recursion", "closed"]


def log2_exact(N: int) -> int:
    """``log2 N`` for a positive power of two; raises otherwise."""
    if isinstance(N, bool) or not isinstance(N, (int, np.integer)) or N < 1 or N & (N - 1):
        raise ValueError(f"N must be a positive power of two, got {N!r}")
    return int(N).bit_length() - 1


def xi_poly(a: float, b: float, c: float) -> Callable[[int], float]:
    """Multiply model ``xi(n) = a log2^2 n + b log2 n + c``."""
    def xi(n: int) -> float:
        l = log2_exact(n)
        return a * l * l + b * l + c
    return xi


@dataclass(frozen=True)
class CplModel:
    """Per-level cost model.

    Without ``xi`` the per-level cost is ``c1 L^2 + c2 L + c3`` with
    ``L = log2 N``.  With ``xi`` it is derived from the algorithm's operation
    counts; ``kmax`` and ``m`` only matter for LIF.
    """

    c1: float = 0.0
    c2: float = 0.0
    c3: float = 0.0
    Q: int = 2
    xi: Callable[[int], float] | None = None
    kmax: int = 0
    m: int = 4

    def __post_init__(self):
        if self.Q not in (1, 2):
            raise ValueError("Q must be 1 or 2")

    @classmethod
    def for_rinch(cls, c1=0.0, c2=0.0, c3=0.0, xi=None) -> CplModel:
        return cls(c1, c2, c3, Q=2, xi=xi)

    @classmethod
    def for_lif(cls, c1=0.0, c2=0.0, c3=0.0, xi=None, kmax=0, m=4) -> CplModel:
        return cls(c1, c2, c3, Q=1, xi=xi, kmax=kmax, m=m)

    def poly(self, N: int) -> float:
        L = log2_exact(N)
        return self.c1 * L * L + self.c2 * L + self.c3

    def rinch_level(self, N: int) -> float:
        """``P(N)``: three multiplies of size N/2 and three additions."""
        if self.xi is None:
            return self.poly(N)
        return 3 * self.xi(N // 2) + 3 * (log2_exact(N // 2) + 1)

    def lif_level(self, N: int) -> float:
        """``R(N)``: ``kmax`` refinement steps plus the start-guess construction."""
        if self.xi is None:
            return self.poly(N)
        L, m = log2_exact(N), self.m
        refine = self.kmax * ((m + 2) * self.xi(N) + (2 * m + 3) * (L + 1))
        return refine + 2 * self.xi(N // 2) + 2 * L + 1


def cpl_recursion(N: int, level: Callable[[int], float], Q: int) -> float:
    """``Psi(N) = level(N) + Q * Psi(N/2)`` with ``Psi(1) = 1``."""
    L = log2_exact(N)
    psi = 1.0
    for k in range(1, L + 1):
        psi = level(1 << k) + Q * psi
    return psi


def rinch_cpl(N: int, model: CplModel, form: Form = "recursion") -> float:
    if form == "recursion":
        return cpl_recursion(N, model.rinch_level, model.Q)
    if form != "closed":
        raise ValueError(f"unknown form {form!r}")
    if model.xi is not None or model.Q != 2:
        raise ValueError("closed form needs Q = 2 and explicit c1, c2, c3")
    L = log2_exact(N)
    c1, c2, c3 = model.c1, model.c2, model.c3
    return (1 + 6 * c1 + 2 * c2 + c3) * N - c1 * L * L - (4 * c1 + c2) * L - 6 * c1 - 2 * c2 - c3


def lif_cpl(N: int, model: CplModel, form: Form = "recursion") -> float:
    if form == "recursion":
        return cpl_recursion(N, model.lif_level, model.Q)
    if form != "closed":
        raise ValueError(f"unknown form {form!r}")
    if model.xi is not None or model.Q != 1:
        raise ValueError("closed form needs Q = 1 and explicit c1, c2, c3")
    L = log2_exact(N)
    c1, c2, c3 = model.c1, model.c2, model.c3
    # sum_{j=1..L} (c1 j^2 + c2 j + c3) + 1
    return (c1 / 3) * L**3 + (c1 / 2 + c2 / 2) * L**2 + (c1 / 6 + c2 / 2 + c3) * L + 1


def rinch_coefficients(a: float, b: float, c: float) -> tuple[float, float, float]:
    """``(c1, c2, c3)`` of ``P(N)`` when ``xi = xi_poly(a, b, c)``."""
    return 3 * a, -6 * a + 3 * b + 3, 3 * a - 3 * b + 3 * c


def lif_coefficients(a: float, b: float, c: float, kmax: int, m: int) -> tuple[float, float, float]:
    """``(c1, c2, c3)`` of ``R(N)`` when ``xi = xi_poly(a, b, c)``."""
    k, w = kmax, 2 * m + 3
    return (
        k * (m + 2) * a + 2 * a,
        k * ((m + 2) * b + w) - 4 * a + 2 * b + 2,
        k * ((m + 2) * c + w) + 2 * a - 2 * b + 2 * c + 1,
    )


def fit_log_polynomial(points: Iterable[tuple[float, float]]) -> tuple[float, float, float, float, float]:
    """Least-squares fit of ``c0 + c1 l + c2 l^2 + c3 l^3`` with ``l = log2 N``.

    Returns the four coefficients and the RMS residual.
    """
    pts = [(float(n), float(y)) for n, y in points]
    if len({n for n, _ in pts}) < 4:
        raise ValueError("need at least 4 distinct N to fit a cubic in log N")
    if any(n <= 0 for n, _ in pts):
        raise ValueError("N must be positive")
    l = np.log2([n for n, _ in pts])
    y = np.array([v for _, v in pts])
    design = np.vander(l, 4, increasing=True)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = math.sqrt(float(np.mean((design @ coef - y) ** 2)))
    return (*(float(x) for x in coef), resid)
