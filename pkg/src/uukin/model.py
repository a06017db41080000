"""Physical inputs: statistics, potential, initial datum, quasi-free Wigner data.

Everything is fixed to Gaussians in dimension 3 so that all transforms are
closed form.  Conventions used throughout the package:

    full Fourier      f_hat(xi, eta)  = ∫ dx dv e^{-i xi·x - i eta·v} f(x, v)
    partial Fourier   f_tilde(x, eta) = ∫ dv     e^{-i eta·v}         f(x, v)

with the inverse transform carrying (2π)^{-3} per 3-dimensional block.

The j-particle exchange terms f_j^pi are the pair products

    f_tilde_j^pi(X; H) = prod_k f0_tilde( (x_k + x_pk)/2 - eps (eta_k - eta_pk)/4,
                                          -(x_k - x_pk)/eps + (eta_k + eta_pk)/2 )

(pk = pi(k)); their full Fourier transforms are evaluated exactly by reducing
the x-integrals to a real-SPD quadratic form (complex shifts only enter the
linear term, so no branch ambiguity arises; the determinant branch is fixed
by the positive-definite real part).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import solve_triangular

THETA_TILDE_FACTOR = 8.0 * math.pi**3  # multiplies theta in the (1 + 8π³θf) brackets


@dataclass(frozen=True)
class Statistics:
    """theta = +1 for Bose, -1 for Fermi."""

    theta: int

    def __post_init__(self):
        if self.theta not in (-1, 1):
            raise ValueError("theta must be +1 (Bose) or -1 (Fermi)")

    @property
    def theta_tilde(self) -> float:
        return THETA_TILDE_FACTOR * self.theta

    @property
    def name(self) -> str:
        return "bose" if self.theta == 1 else "fermi"


BOSE = Statistics(+1)
FERMI = Statistics(-1)


@dataclass(frozen=True)
class GaussianPotential:
    """Two-body potential phi(x) = amplitude * exp(-|x|²/(2 width²)).

    Real and even, hence phi_hat is real and even, with Gaussian decay at
    every order, so all smoothness/decay requirements hold automatically.
    """

    amplitude: float = 0.5
    width: float = 1.0

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("width must be positive")

    def phi(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.amplitude * np.exp(-0.5 * np.sum(x * x, axis=-1) / self.width**2)

    def phi_hat(self, k) -> np.ndarray:
        k = np.asarray(k, dtype=float)
        pref = self.amplitude * (2.0 * np.pi) ** 1.5 * self.width**3
        return pref * np.exp(-0.5 * self.width**2 * np.sum(k * k, axis=-1))


@dataclass(frozen=True)
class GaussianDatum:
    """One-particle phase-space Gaussian with total integral `mass`."""

    center_x: tuple = (0.0, 0.0, 0.0)
    center_v: tuple = (0.0, 0.0, 0.0)
    sigma_x: float = 1.0
    sigma_v: float = 1.0
    mass: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center_x", tuple(float(c) for c in self.center_x))
        object.__setattr__(self, "center_v", tuple(float(c) for c in self.center_v))
        if self.sigma_x <= 0 or self.sigma_v <= 0:
            raise ValueError("sigma_x and sigma_v must be positive")
        if self.mass <= 0:
            raise ValueError("mass must be positive")

    @property
    def cx(self) -> np.ndarray:
        return np.asarray(self.center_x)

    @property
    def cv(self) -> np.ndarray:
        return np.asarray(self.center_v)

    def f0(self, x, v) -> np.ndarray:
        """Phase-space density; nonnegative, integrates to mass."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        qx = np.sum((x - self.cx) ** 2, axis=-1) / self.sigma_x**2
        qv = np.sum((v - self.cv) ** 2, axis=-1) / self.sigma_v**2
        norm = self.mass / ((2.0 * np.pi) ** 3 * self.sigma_x**3 * self.sigma_v**3)
        return norm * np.exp(-0.5 * (qx + qv))

    def f0_hat(self, xi, eta) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        eta = np.asarray(eta, dtype=float)
        ex = -0.5 * self.sigma_x**2 * np.sum(xi * xi, axis=-1) - 1j * (xi @ self.cx)
        ev = -0.5 * self.sigma_v**2 * np.sum(eta * eta, axis=-1) - 1j * (eta @ self.cv)
        return self.mass * np.exp(ex + ev)

    def f0_tilde(self, x, eta) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        eta = np.asarray(eta, dtype=float)
        qx = np.sum((x - self.cx) ** 2, axis=-1) / self.sigma_x**2
        gx = np.exp(-0.5 * qx) / ((2.0 * np.pi) ** 1.5 * self.sigma_x**3)
        ev = -0.5 * self.sigma_v**2 * np.sum(eta * eta, axis=-1) - 1j * (eta @ self.cv)
        return self.mass * gx * np.exp(ev)

    def transported(self, x, v, t1: float) -> np.ndarray:
        """Free-streamed datum f0(x - v t1, v): the shared 'transported' helper."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        return self.f0(x - v * t1, v)


def eval_f0_hat(datum: GaussianDatum, xi, eta) -> complex:
    """Full Fourier transform of the datum at (xi, eta)."""
    return complex(datum.f0_hat(np.asarray(xi, float), np.asarray(eta, float)))


def eval_f0_tilde(datum: GaussianDatum, x, eta) -> complex:
    """Velocity-only Fourier transform of the datum at (x, eta)."""
    return complex(datum.f0_tilde(np.asarray(x, float), np.asarray(eta, float)))


# ---------------------------------------------------------------------------
# Permutations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Permutation:
    """Permutation of {1..j} in one-line notation: mapping[k-1] = pi(k)."""

    mapping: tuple

    def __post_init__(self):
        m = tuple(int(i) for i in self.mapping)
        object.__setattr__(self, "mapping", m)
        if sorted(m) != list(range(1, len(m) + 1)):
            raise ValueError(f"{m} is not a permutation of 1..{len(m)}")

    @property
    def j(self) -> int:
        return len(self.mapping)

    @property
    def parity(self) -> int:
        """0 for even, 1 for odd, by transposition count (j - #cycles) mod 2."""
        seen = [False] * self.j
        cycles = 0
        for start in range(self.j):
            if seen[start]:
                continue
            cycles += 1
            k = start
            while not seen[k]:
                seen[k] = True
                k = self.mapping[k] - 1
        return (self.j - cycles) % 2

    def sign(self, statistics: Statistics) -> int:
        return statistics.theta ** self.parity

    @property
    def zero_based(self) -> tuple:
        return tuple(i - 1 for i in self.mapping)

    @staticmethod
    def identity(j: int) -> "Permutation":
        return Permutation(tuple(range(1, j + 1)))

    @staticmethod
    def all_of(j: int):
        for m in itertools.permutations(range(1, j + 1)):
            yield Permutation(m)


# ---------------------------------------------------------------------------
# Quasi-free j-particle Wigner data
# ---------------------------------------------------------------------------

@lru_cache(maxsize=256)
def _pair_matrices(mapping: tuple, eps: float, sigma_x: float, sigma_v: float):
    """Quadratic-form data for the x-integral of the pair product.

    Per Cartesian component the exponent is -u^T A u / 2 + b·u + c with
    u = (x_1..x_j); A = M^T M / sx² + sv² W^T W is real SPD for every
    permutation (ker M ∩ ker W = {0}), so a Cholesky factor exists.
    """
    j = len(mapping)
    p = [i - 1 for i in mapping]
    M = np.zeros((j, j))
    W = np.zeros((j, j))
    for k in range(j):
        M[k, k] += 0.5
        M[k, p[k]] += 0.5
        W[k, k] += -1.0 / eps
        W[k, p[k]] += 1.0 / eps
    A = M.T @ M / sigma_x**2 + sigma_v**2 * (W.T @ W)
    L = np.linalg.cholesky(A)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return M, W, L, logdet


@dataclass(frozen=True)
class QuasiFreeWigner:
    """Initial j-particle Wigner data of quasi-free type at scale eps.

    f_j^0 = sum over permutations pi of theta^{s(pi)} f_j^pi, with the
    identity term the j-fold product of the datum.
    """

    datum: GaussianDatum
    statistics: Statistics
    j: int
    epsilon: float

    def __post_init__(self):
        if self.j < 1:
            raise ValueError("j must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def pi_log_hat(self, pi: Permutation, xi: np.ndarray, eta: np.ndarray) -> np.ndarray:
        """log of the full Fourier transform of f_j^pi.

        xi, eta: (..., j, 3).  Returns complex log values of shape (...,).
        Assembled additively (never via Log of the value), so there is no
        branch ambiguity.
        """
        if pi.j != self.j:
            raise ValueError("permutation order does not match j")
        return _pair_log_hat(self.datum, self.epsilon, pi, xi, eta)

    def pi_hat(self, pi: Permutation, xi, eta) -> complex:
        xi = np.asarray(xi, dtype=float).reshape(self.j, 3)
        eta = np.asarray(eta, dtype=float).reshape(self.j, 3)
        return complex(np.exp(self.pi_log_hat(pi, xi[None], eta[None])[0]))

    def pi_tilde(self, pi: Permutation, x, eta) -> complex:
        """Partial (velocity) Fourier transform of f_j^pi: product of pair factors."""
        if pi.j != self.j:
            raise ValueError("permutation order does not match j")
        x = np.asarray(x, dtype=float).reshape(self.j, 3)
        eta = np.asarray(eta, dtype=float).reshape(self.j, 3)
        p = list(pi.zero_based)
        val = 1.0 + 0.0j
        for k in range(self.j):
            xk, xp = x[k], x[p[k]]
            ek, ep = eta[k], eta[p[k]]
            pos = 0.5 * (xk + xp) - 0.25 * self.epsilon * (ek - ep)
            freq = -(xk - xp) / self.epsilon + 0.5 * (ek + ep)
            val *= complex(self.datum.f0_tilde(pos, freq))
        return val

    def initial_hat(self, xi, eta) -> complex:
        """f_j^0 full Fourier transform: statistics-weighted permutation sum."""
        total = 0.0 + 0.0j
        for pi in Permutation.all_of(self.j):
            total += pi.sign(self.statistics) * self.pi_hat(pi, xi, eta)
        return total


def _pair_log_hat(datum: GaussianDatum, eps: float, pi: Permutation,
                  xi: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Batched log f_j^pi_hat; xi, eta of shape (n, j, 3) -> (n,) complex."""
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    j = pi.j
    M, W, L, logdet = _pair_matrices(pi.mapping, float(eps),
                                     datum.sigma_x, datum.sigma_v)
    p = list(pi.zero_based)
    sx2 = datum.sigma_x**2
    sv2 = datum.sigma_v**2
    cx = datum.cx
    cv = datum.cv

    eta_p = eta[..., p, :]
    alpha = cx + 0.25 * eps * (eta - eta_p)          # (n, j, 3)
    svec = 0.5 * (eta + eta_p)                        # (n, j, 3)

    w_ones = W.T @ np.ones(j)                         # (j,)
    b = (np.einsum("lk,nld->nkd", M, alpha) / sx2
         - sv2 * np.einsum("lk,nld->nkd", W, svec)
         - 1j * w_ones[None, :, None] * cv[None, None, :]
         - 1j * xi)                                   # (n, j, 3)

    n = b.shape[0]
    rhs = np.moveaxis(b, 1, 0).reshape(j, n * 3)
    yv = solve_triangular(L, rhs, lower=True)         # (j, n*3)
    quad = 0.5 * np.sum(yv * yv, axis=0).reshape(n, 3).sum(axis=-1)

    cterm = (-0.5 * np.sum(alpha * alpha, axis=(-1, -2)) / sx2
             - 0.5 * sv2 * np.sum(svec * svec, axis=(-1, -2))
             - 1j * np.einsum("nkd,d->n", svec, cv))

    const = j * math.log(datum.mass) - 3.0 * j * math.log(datum.sigma_x) \
        - 1.5 * logdet
    return const + quad + cterm


def eval_f2_pi_hat(qf: QuasiFreeWigner, pi: Permutation,
                   xi1, xi2, eta1, eta2) -> complex:
    """Full Fourier transform of the two-particle pair term f_2^pi.

    For pi = (1,2) this is the product f0_hat(xi1,eta1) f0_hat(xi2,eta2);
    for pi = (2,1) the closed-form exchange integral, which carries an
    explicit eps³ prefactor.
    """
    if qf.j != 2:
        raise ValueError("eval_f2_pi_hat requires j = 2 data")
    if pi.j != 2:
        raise ValueError("pi must be a permutation of two elements")
    xi = np.stack([np.asarray(xi1, float), np.asarray(xi2, float)])
    eta = np.stack([np.asarray(eta1, float), np.asarray(eta2, float)])
    return qf.pi_hat(pi, xi, eta)


def eval_f3_pi_hat(qf: QuasiFreeWigner, pi: Permutation, xi, eta) -> complex:
    """Full Fourier transform of the three-particle pair term f_3^pi.

    xi, eta: arrays of shape (3, 3) (one row per particle).  Identity and
    fixed-element permutations factor into f0_hat times one exchange pair;
    cyclic permutations reduce to the same quadratic form with a full
    3-cycle coupling.  All cases share one exact evaluator.
    """
    if qf.j != 3:
        raise ValueError("eval_f3_pi_hat requires j = 3 data")
    if pi.j != 3:
        raise ValueError("pi must be a permutation of three elements")
    return qf.pi_hat(pi, xi, eta)


def exchange_pair_hat_reference(datum: GaussianDatum, eps: float,
                                xi1, xi2, eta1, eta2) -> complex:
    """Explicit formula for the two-particle exchange transform.

    Independent algebraic route kept alongside the quadratic-form evaluator:

        eps³ m² (2 sx sv)^{-3}
        exp[ -i(xi1+xi2)·cx - i(eta1+eta2)·cv
             - sx²|xi1+xi2|²/4 - sv²|eta1+eta2|²/4
             - eps²|eta1-eta2|²/(16 sx²) - eps²|xi1-xi2|²/(16 sv²) ]
    """
    xi1 = np.asarray(xi1, float)
    xi2 = np.asarray(xi2, float)
    eta1 = np.asarray(eta1, float)
    eta2 = np.asarray(eta2, float)
    sx, sv = datum.sigma_x, datum.sigma_v
    xs, xd = xi1 + xi2, xi1 - xi2
    es, ed = eta1 + eta2, eta1 - eta2
    expo = (-1j * (xs @ datum.cx) - 1j * (es @ datum.cv)
            - 0.25 * sx**2 * (xs @ xs) - 0.25 * sv**2 * (es @ es)
            - eps**2 * (ed @ ed) / (16.0 * sx**2)
            - eps**2 * (xd @ xd) / (16.0 * sv**2))
    return datum.mass**2 * eps**3 / (2.0 * sx * sv) ** 3 * np.exp(expo)
