"""Reproducible high-dimensional integration.

Importance-sampled Monte Carlo for oscillatory Gaussian integrands, the
regularized half-line phase integral Delta^+, and the collision-sphere
parametrization that resolves the momentum/energy delta pair of a binary
collision.

Reproducibility contract: every estimate is a deterministic function of
(samples, seed, strata).  Each stratum owns a counter-based random stream
derived from (seed, stratum index); strata may be evaluated on any number
of threads and are merged in index order with compensated accumulation, so
results are bit-identical across thread counts.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import wofz


class NonFiniteIntegrandError(RuntimeError):
    """Integrand returned a non-finite value; carries the offending point."""

    def __init__(self, point):
        self.point = np.asarray(point)
        super().__init__(f"non-finite integrand value at sample point {self.point}")


class DegenerateCollisionError(ValueError):
    """Grazing collision |v - v_star| below resolution; sphere undefined."""


def thread_count(n_jobs: int | None = None) -> int:
    """Worker cap for stratum-parallel evaluation (UUKIN_THREADS env var)."""
    if n_jobs is not None:
        return max(1, n_jobs)
    env = os.environ.get("UUKIN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return max(1, min(8, os.cpu_count() or 1))


@dataclass(frozen=True)
class QuadratureSpec:
    """Sampling budget and reproducibility knobs shared by all MC evaluators.

    smear_kappa regularizes Delta^+ (test oracles only); time_cutoff
    truncates half-line time integrals where they are not done in closed
    form.  The truncation is chosen so the Gaussian tail is < 1e-8 of the
    integral scale for the default data.
    """

    samples: int = 20000
    seed: int = 20240901
    strata: int = 16
    smear_kappa: float = 0.05
    time_cutoff: float = 40.0

    def __post_init__(self):
        if self.samples < 1000:
            raise ValueError("samples must be >= 1000")
        if self.strata < 1:
            raise ValueError("strata must be >= 1")
        if self.samples < self.strata:
            raise ValueError("need at least one sample per stratum")
        if self.smear_kappa <= 0:
            raise ValueError("smear_kappa must be positive")
        if self.time_cutoff <= 0:
            raise ValueError("time_cutoff must be positive")

    def with_samples(self, samples: int) -> "QuadratureSpec":
        return QuadratureSpec(samples, self.seed, self.strata,
                              self.smear_kappa, self.time_cutoff)


def _tag_to_int(tag) -> int:
    # str/float tags go through crc32: stable across processes and platforms
    # (builtin hash() is process-salted for strings)
    import zlib

    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    if isinstance(tag, float):
        return zlib.crc32(repr(float(tag)).encode())
    return zlib.crc32(str(tag).encode())


def stream(seed: int, *tags) -> np.random.Generator:
    """Counter-based random stream keyed by (seed, tags).

    Philox streams with distinct keys are independent; the derivation is
    deterministic across runs and platforms.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_to_int(t) for t in tags]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def stratum_sizes(samples: int, strata: int) -> list[int]:
    base = samples // strata
    rem = samples - base * strata
    return [base + (1 if i < rem else 0) for i in range(strata)]


def combine_strata(values: Sequence[complex]) -> tuple[complex, float]:
    """Mean and 1-sigma standard error of independent per-stratum means.

    Order-independent: compensated accumulation over the stratum index.
    """
    vals = np.asarray(list(values), dtype=complex)
    n = len(vals)
    mean = complex(math.fsum(vals.real) / n, math.fsum(vals.imag) / n)
    if n == 1:
        return mean, float("inf")
    dev = vals - mean
    var = (math.fsum(dev.real**2) + math.fsum(dev.imag**2)) / (n - 1)
    return mean, math.sqrt(var / n)


@dataclass(frozen=True)
class GaussianEnvelope:
    """Separable Gaussian importance density N(mean, diag(scale^2))."""

    mean: tuple
    scale: tuple

    @staticmethod
    def isotropic(dim: int, scale: float, mean: float = 0.0) -> "GaussianEnvelope":
        return GaussianEnvelope((mean,) * dim, (scale,) * dim)

    @property
    def dim(self) -> int:
        return len(self.mean)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        m = np.asarray(self.mean)
        s = np.asarray(self.scale)
        return m + s * rng.standard_normal((n, self.dim))

    def pdf(self, x: np.ndarray) -> np.ndarray:
        m = np.asarray(self.mean)
        s = np.asarray(self.scale)
        z = (x - m) / s
        norm = (2.0 * np.pi) ** (-0.5 * self.dim) / np.prod(s)
        return norm * np.exp(-0.5 * np.sum(z * z, axis=-1))


def _check_finite(vals: np.ndarray, points: np.ndarray):
    bad = ~np.isfinite(vals)
    if np.any(bad):
        idx = int(np.argmax(bad))
        raise NonFiniteIntegrandError(points[idx])


def integrate_mc(integrand: Callable[[np.ndarray], np.ndarray],
                 envelope: GaussianEnvelope,
                 spec: QuadratureSpec,
                 antithetic: bool = False) -> tuple[complex, float]:
    """Importance-sampled stratified MC estimate of ∫ f(x) dx.

    integrand maps (n, dim) sample arrays to (n,) values (complex allowed).
    With antithetic=True each draw x is paired with its mirror 2*mean - x;
    an integrand odd about the envelope mean then integrates to exactly 0.

    Returns (estimate, std_error); std_error is the 1-sigma spread of the
    per-stratum means.  Raises NonFiniteIntegrandError on non-finite values.
    """
    sizes = stratum_sizes(spec.samples, spec.strata)

    def one_stratum(s: int) -> complex:
        rng = stream(spec.seed, "integrate_mc", s)
        x = envelope.sample(rng, sizes[s])
        q = envelope.pdf(x)
        fx = np.asarray(integrand(x))
        _check_finite(fx, x)
        w = fx / q
        if antithetic:
            xm = 2.0 * np.asarray(envelope.mean) - x
            fm = np.asarray(integrand(xm))
            _check_finite(fm, xm)
            w = 0.5 * (w + fm / envelope.pdf(xm))
        return complex(np.mean(w))

    per_stratum = _run_strata(one_stratum, spec.strata)
    return combine_strata(per_stratum)


def _run_strata(fn: Callable[[int], complex], strata: int) -> list[complex]:
    workers = thread_count()
    if workers == 1 or strata == 1:
        return [fn(s) for s in range(strata)]
    with ThreadPoolExecutor(max_workers=min(workers, strata)) as pool:
        return list(pool.map(fn, range(strata)))


# ---------------------------------------------------------------------------
# Delta^+ and the collision sphere
# ---------------------------------------------------------------------------

def delta_plus(alpha, kappa: float):
    """Regularized half-line phase integral ∫_0^∞ e^{i a s - k s} ds = 1/(k - i a).

    As kappa -> 0 this tends to pi*delta(a) + i p.v.(1/a) in the sense of
    distributions; it is only ever used inside symmetrized pairings.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    alpha = np.asarray(alpha, dtype=float)
    out = 1.0 / (kappa - 1j * alpha)
    return complex(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CollisionPoint:
    """One resolved point of the momentum/energy-conserving collision manifold."""

    v: np.ndarray
    v_star: np.ndarray
    sigma_dir: np.ndarray
    v_prime: np.ndarray
    v_star_prime: np.ndarray
    jacobian_weight: float


def collision_outgoing(v: np.ndarray, v_star: np.ndarray,
                       sigma_dir: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Outgoing pair on the collision sphere; vectorized over leading axes."""
    center = 0.5 * (v + v_star)
    radius = 0.5 * np.linalg.norm(v - v_star, axis=-1, keepdims=True)
    vp = center + radius * sigma_dir
    vsp = center - radius * sigma_dir
    return vp, vsp


def sample_collision_sphere(v, v_star, sigma_dir) -> CollisionPoint:
    """Resolve the delta pair δ³(v+v*-v'-v'*) δ(½(v²+v*²-v'²-v'*²)).

    v' = (v+v*)/2 + (|v-v*|/2) σ, v'* is the mirror point, and
    jacobian_weight = |v-v*|/4 is the surface factor such that
    ∫ dv' dv'* δ(mom) δ(energy) g = ∫_{S²} dσ jacobian_weight · g(v', v'*).
    """
    v = np.asarray(v, dtype=float)
    v_star = np.asarray(v_star, dtype=float)
    sigma_dir = np.asarray(sigma_dir, dtype=float)
    rel = np.linalg.norm(v - v_star)
    if rel < 1e-12:
        raise DegenerateCollisionError(
            f"|v - v_star| = {rel:.3e} below resolution; grazing collision")
    vp, vsp = collision_outgoing(v, v_star, sigma_dir)
    return CollisionPoint(v, v_star, sigma_dir, vp, vsp, rel / 4.0)


def uniform_sphere(rng: np.random.Generator, n: int) -> np.ndarray:
    """n unit vectors uniform on S²."""
    x = rng.standard_normal((n, 3))
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Closed-form time-segment integrals of exp(quadratic)
# ---------------------------------------------------------------------------

_SQRT_PI = math.sqrt(math.pi)


def _exp_w(z: np.ndarray, log_pref: np.ndarray) -> np.ndarray:
    """e^{log_pref} * w(z) with the Faddeeva function, stable in both half-planes.

    w is bounded for Im z >= 0; for Im z < 0 use w(z) = 2 e^{-z^2} - w(-z).
    Exponents are assembled before a single exp call so bounded integrands
    never overflow.
    """
    z = np.asarray(z, dtype=complex)
    log_pref = np.broadcast_to(np.asarray(log_pref, dtype=complex), z.shape)
    upper = z.imag >= 0.0
    out = np.empty(z.shape, dtype=complex)
    if np.any(upper):
        out[upper] = np.exp(log_pref[upper]) * wofz(z[upper])
    if np.any(~upper):
        zl = z[~upper]
        lp = log_pref[~upper]
        out[~upper] = 2.0 * np.exp(lp - zl * zl) - np.exp(lp) * wofz(-zl)
    return out


def gauss_segment_integral(a, b, c, upper):
    """∫_0^T exp(a t² + b t + c) dt for complex (a, b, c), Re a <= 0.

    Vectorized; exact up to roundoff (complex error functions via the
    Faddeeva function).  upper may be a scalar or an array; upper=inf is
    allowed when Re a < 0.
    """
    a = np.atleast_1d(np.asarray(a, dtype=complex))
    b, c = np.broadcast_arrays(
        np.asarray(b, dtype=complex), np.asarray(c, dtype=complex))
    a, b, c = np.broadcast_arrays(a, b, c)
    T = np.broadcast_to(np.asarray(upper, dtype=float), a.shape)

    out = np.zeros(a.shape, dtype=complex)
    infinite = np.isinf(T)
    zero_len = ~infinite & (T <= 0.0)

    # nearly-linear exponent: fall back to the b-only primitive
    finite = ~infinite
    small_a = np.abs(a) * np.where(finite, T, 1.0) ** 2 < 1e-14
    # half-line with negligible curvature relative to the linear decay:
    # the wofz route is ill-conditioned there, the primitive is exact
    lin_inf = infinite & (np.abs(a) < 1e-13 * np.maximum(np.abs(b) ** 2, 1.0))
    if np.any(lin_inf):
        if np.any(b[lin_inf].real >= 0.0):
            raise ValueError("half-line integral requires decay")
        out[lin_inf] = -np.exp(c[lin_inf]) / b[lin_inf]
    lin = small_a & finite & ~zero_len
    if np.any(lin):
        bt = b[lin] * T[lin]
        tiny = np.abs(bt) < 1e-8
        res = np.where(
            tiny,
            T[lin] * np.exp(c[lin]) * (1.0 + bt / 2.0 + bt * bt / 6.0),
            np.exp(c[lin]) * np.expm1(bt) / np.where(tiny, 1.0, b[lin]),
        )
        out[lin] = res

    gen = ~small_a & ~zero_len & ~lin_inf
    if np.any(gen):
        ag, bg, cg, Tg = a[gen], b[gen], c[gen], T[gen]
        if np.any(np.isinf(Tg) & (ag.real >= 0.0)):
            raise ValueError("half-line integral requires Re a < 0")
        alpha = np.sqrt(-ag)  # principal branch: Re alpha >= 0 for Re a <= 0
        beta = bg / (2.0 * alpha)
        pref = _SQRT_PI / (2.0 * alpha)
        term0 = _exp_w(-1j * beta, cg)
        res = pref * term0
        fin = ~np.isinf(Tg)
        if np.any(fin):
            z1 = alpha[fin] * Tg[fin] - beta[fin]
            log_end = ag[fin] * Tg[fin] ** 2 + bg[fin] * Tg[fin] + cg[fin]
            res[fin] = pref[fin] * (term0[fin] - _exp_w(1j * z1, log_end))
        out[gen] = res

    return out if out.ndim else complex(out)
