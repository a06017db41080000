"""Scaled hierarchy operators and the eps-dependent second-order expansion.

In Fourier variables (hat = full transform, conventions as in model) the
scaled interaction and contraction operators act as

    T2_hat f(xi1,xi2;eta1,eta2) = -i sum_s s ∫ dh phi_hat(h)/(2π)³
            e^{i s (h/2)·(eta2-eta1)} f(xi1-h/eps, xi2+h/eps; eta1, eta2)
    C2_hat f(xi;eta)            = T2_hat f(xi, 0; eta, 0)
    S(t)_hat f(xi;eta)          = f(xi, eta + xi t)

The expansion of the one-particle transform at second order in the
potential consists of one free term plus sixteen interaction terms: two
single-collision terms (S2, one per 2-permutation), two double-collision
two-particle terms (T2), and twelve three-particle terms (W3/V3, one per
3-permutation each).  Every term evaluator:

  * samples the momentum-transfer variables in eps-uniform coordinates
    (the supports are pinned by the Gaussian closed forms, so each term has
    its own linear variable map),
  * performs the inner time integral analytically per sample - the full
    integrand is exp(quadratic in t2), so a complex-Gaussian segment
    integral is exact and removes the oscillation in the rapidly rotating
    phases,
  * mirrors every momentum variable antithetically (all sign combinations
    averaged), which realizes the parity cancellations at machine
    precision,
  * shares its random stream within its cancellation family, so terms that
    diverge individually but cancel in pairs do so per sample.

Values returned by eval_term_eps include the eps-power prefactor
(eps^{-7/2} for S2, eps^{-4} for T2, eps^{-7} for W3/V3) and the statistics
weight theta^{s(pi)} of the term's permutation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import (GaussianDatum, GaussianPotential, Permutation,
                    QuasiFreeWigner, Statistics, _pair_log_hat)
from .quad import (QuadratureSpec, combine_strata, gauss_segment_integral,
                   stratum_sizes, stream)

TERM_KINDS = ("FREE", "S2", "T2", "W3", "V3")

_TWO_PI3 = (2.0 * math.pi) ** 3
_TWO_PI6 = (2.0 * math.pi) ** 6


@dataclass(frozen=True)
class ScaledOps:
    """Scale-dependent hierarchy operators; eps = 1 gives the unscaled ones."""

    epsilon: float
    potential: GaussianPotential

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class TermSpec:
    """Identity of one expansion term at intermediate time t1."""

    kind: str
    permutation: Permutation | None
    epsilon: float
    t1: float
    statistics: Statistics

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.kind in ("S2", "T2"):
            if self.permutation is None or self.permutation.j != 2:
                raise ValueError(f"{self.kind} requires a 2-permutation")
        elif self.kind in ("W3", "V3"):
            if self.permutation is None or self.permutation.j != 3:
                raise ValueError(f"{self.kind} requires a 3-permutation")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.t1 < 0:
            raise ValueError("t1 must be nonnegative")


def term_specs_for(epsilon: float, t1: float,
                   statistics: Statistics) -> list[TermSpec]:
    """The sixteen interaction terms of the assembly (FREE handled apart)."""
    specs = [TermSpec("S2", pi, epsilon, t1, statistics)
             for pi in Permutation.all_of(2)]
    specs += [TermSpec("T2", pi, epsilon, t1, statistics)
              for pi in Permutation.all_of(2)]
    specs += [TermSpec("W3", pi, epsilon, t1, statistics)
              for pi in Permutation.all_of(3)]
    specs += [TermSpec("V3", pi, epsilon, t1, statistics)
              for pi in Permutation.all_of(3)]
    return specs


# ---------------------------------------------------------------------------
# Generic operators (Fourier-space, MC over the momentum transfer)
# ---------------------------------------------------------------------------

def free_stream_hat(f_hat, t: float, xi, eta):
    """Free streaming in Fourier variables: shift eta by xi*t."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    return f_hat(xi, eta + xi * t)


def _phi_envelope_samples(potential: GaussianPotential, spec: QuadratureSpec):
    """Per-stratum standard-normal draws scaled to the phi_hat width."""
    scale = 1.0 / potential.width
    sizes = stratum_sizes(spec.samples, spec.strata)
    out = []
    for s in range(spec.strata):
        rng = stream(spec.seed, "op_h", s)
        out.append(scale * rng.standard_normal((sizes[s], 3)))
    return out, scale


def apply_T2_hat(ops: ScaledOps, f_hat, xi1, xi2, eta1, eta2,
                 spec: QuadratureSpec) -> complex:
    """Interaction operator on a two-particle transform, MC over h.

    f_hat must accept (xi1, xi2, eta1, eta2) arrays of shape (n, 3) and
    return (n,) complex values.  The sign sum is performed analytically
    (it reduces to a sine), so it vanishes identically when eta2 = eta1.
    """
    xi1 = np.asarray(xi1, float)
    xi2 = np.asarray(xi2, float)
    eta1 = np.asarray(eta1, float)
    eta2 = np.asarray(eta2, float)
    eps = ops.epsilon
    batches, scale = _phi_envelope_samples(ops.potential, spec)
    per = []
    for h in batches:
        q = ((2 * math.pi) ** -1.5 / scale**3
             * np.exp(-0.5 * np.sum(h * h, axis=-1) / scale**2))
        vals = 0.0
        for sgn in (1.0, -1.0):
            hh = sgn * h
            f = f_hat(xi1 - hh / eps, xi2 + hh / eps,
                      np.broadcast_to(eta1, hh.shape),
                      np.broadcast_to(eta2, hh.shape))
            if not np.all(np.isfinite(f)):
                bad = int(np.argmax(~np.isfinite(np.asarray(f))))
                raise FloatingPointError(
                    f"non-finite integrand at h = {hh[bad]}")
            vals = vals + 0.5 * (2.0 / _TWO_PI3) * ops.potential.phi_hat(hh) \
                * np.sin(hh @ (eta2 - eta1) / 2.0) * f
        per.append(complex(np.mean(vals / q)))
    val, _ = combine_strata(per)
    return val


def apply_C2_hat(ops: ScaledOps, f_hat, xi, eta,
                 spec: QuadratureSpec) -> complex:
    """Contraction of particle 2: T2_hat evaluated on the (xi,0;eta,0) slot."""
    xi = np.asarray(xi, float)
    eta = np.asarray(eta, float)
    return apply_T2_hat(ops, f_hat, xi, np.zeros(3), eta, np.zeros(3), spec)


# ---------------------------------------------------------------------------
# Term engine
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Param:
    """Linear sample map (u1, u2) -> (h1, h2) and Gaussian envelope widths."""

    c11: float
    c12: float
    c21: float
    c22: float
    p1: float  # envelope precision of u1 (h = eps-scaled variables are O(1))
    p2: float
    family: str
    single: bool = False  # S2 terms integrate over one momentum only

    @property
    def jacobian(self) -> float:
        if self.single:
            return abs(self.c11) ** 3
        return abs(self.c11 * self.c22 - self.c12 * self.c21) ** 3


def _param_for(spec: TermSpec, datum: GaussianDatum,
               potential: GaussianPotential) -> _Param:
    eps, t1 = spec.epsilon, spec.t1
    sx2 = datum.sigma_x**2
    sv2 = datum.sigma_v**2
    a2 = potential.width**2
    pid = spec.permutation.mapping if spec.permutation else ()
    if spec.kind == "S2":
        if pid == (1, 2):
            return _Param(eps, 0, 0, 0, sx2 + sv2 * t1**2, 1.0,
                          "s2_12", single=True)
        return _Param(1.0, 0, 0, 0,
                      a2 + 0.5 / sv2 + 0.5 * t1**2 / sx2, 1.0,
                      "s2_21", single=True)
    if spec.kind == "T2":
        if pid == (1, 2):
            return _Param(eps, -1.0, 0.0, 1.0, 2.0 * sx2, 2.0 * a2, "t2_12")
        return _Param(1.0, 0.0, -1.0, 1.0, 2.0 * a2, 0.5 / sv2, "t2_21")
    cyc = {(2, 3, 1), (3, 1, 2)}
    if pid == (1, 2, 3):
        fam = "id3"
        return _Param(eps, 0.0, 0.0, eps, sx2, sx2, fam)
    if pid in cyc:
        p = a2 + sv2
        return _Param(1.0, 0.0, 0.0, 1.0, p, p, "cyc")
    # fixed-element transpositions
    if spec.kind == "W3":
        if pid == (1, 3, 2):
            return _Param(eps, -1.0, 0.0, 1.0, sx2,
                          2.0 * a2 + 0.5 / sv2, "w3_1")
        if pid == (3, 2, 1):
            return _Param(eps, 0.0, 0.0, 1.0, sx2 + sv2 * t1**2,
                          a2 + 0.5 / sv2, "w3_2")
        return _Param(1.0, 0.0, 0.0, eps, a2 + 0.5 / sv2, sx2, "fix3")
    if pid == (1, 3, 2):
        return _Param(eps, 0.0, 0.0, 1.0, sx2, a2 + 0.5 / sv2, "v3_1")
    if pid == (3, 2, 1):
        return _Param(eps, 1.0, 0.0, 1.0, sx2, 2.0 * a2 + 0.5 / sv2, "v3_2")
    return _Param(1.0, 0.0, 0.0, eps, a2 + 0.5 / sv2, sx2, "fix3")


def _term_args(kind: str, eps: float, t1: float, t2, xi, eta, h1, h2):
    """Fourier arguments and interaction phase of one term at inner time t2.

    h1, h2: (n, 3); t2 scalar.  Returns (xi_args, eta_args, phase_fn) where
    phase_fn(s1, s2) gives the (n,) phase for that sign pair.
    """
    n = h1.shape[0]
    if kind == "T2":
        xi_a = np.empty((n, 2, 3))
        eta_a = np.empty((n, 2, 3))
        ktot = (h1 + h2) / eps
        xi_a[:, 0] = xi - ktot
        xi_a[:, 1] = ktot
        tsum = (t1 * h1 + t2 * h2) / eps
        eta_a[:, 0] = eta + t1 * xi - tsum
        eta_a[:, 1] = tsum

        def phase(s1, s2):
            arg = eta + xi * (t1 - t2) - (2.0 / eps) * (t1 - t2) * h1
            return (-0.5 * s1 * (h1 @ eta)
                    - 0.5 * s2 * np.sum(h2 * arg, axis=-1))

        return xi_a, eta_a, phase
    if kind == "W3":
        xi_a = np.empty((n, 3, 3))
        eta_a = np.empty((n, 3, 3))
        xi_a[:, 0] = xi - (h1 + h2) / eps
        xi_a[:, 1] = h1 / eps
        xi_a[:, 2] = h2 / eps
        eta_a[:, 0] = eta + t1 * xi - (t1 * h1 + t2 * h2) / eps
        eta_a[:, 1] = t1 * h1 / eps
        eta_a[:, 2] = t2 * h2 / eps

        def phase(s1, s2):
            arg = eta + (t1 - t2) * (xi - h1 / eps)
            return (-0.5 * s1 * (h1 @ eta)
                    - 0.5 * s2 * np.sum(h2 * arg, axis=-1))

        return xi_a, eta_a, phase
    # V3
    xi_a = np.empty((n, 3, 3))
    eta_a = np.empty((n, 3, 3))
    xi_a[:, 0] = xi - h1 / eps
    xi_a[:, 1] = (h1 - h2) / eps
    xi_a[:, 2] = h2 / eps
    eta_a[:, 0] = eta + t1 * xi - t1 * h1 / eps
    eta_a[:, 1] = (t1 * h1 - t2 * h2) / eps
    eta_a[:, 2] = t2 * h2 / eps

    def phase(s1, s2):
        return (-0.5 * s1 * (h1 @ eta)
                - 0.5 * s2 * (t1 - t2) / eps * np.sum(h2 * h1, axis=-1))

    return xi_a, eta_a, phase


def _term_values(spec: TermSpec, datum: GaussianDatum,
                 potential: GaussianPotential, xi: np.ndarray,
                 eta: np.ndarray, u1: np.ndarray, u2: np.ndarray,
                 param: _Param, sigma2_filter=None) -> np.ndarray:
    """Integrand values (already divided by nothing - raw term integrand
    times the linear-map Jacobian) at the sample points.

    The inner time integral over [0, t1] is exact per sample: the exponent
    is quadratic in t2, pinned by evaluation at t2 = 0, t1/2, t1.
    """
    eps, t1 = spec.epsilon, spec.t1
    pi = spec.permutation
    h1 = param.c11 * u1 + param.c12 * u2
    h2 = param.c21 * u1 + param.c22 * u2
    n = u1.shape[0]

    if spec.kind == "S2":
        h = h1
        xi_a = np.empty((n, 2, 3))
        eta_a = np.empty((n, 2, 3))
        xi_a[:, 0] = xi - h / eps
        xi_a[:, 1] = h / eps
        eta_a[:, 0] = eta + t1 * (xi - h / eps)
        eta_a[:, 1] = t1 * h / eps
        logf = _pair_log_hat(datum, eps, pi, xi_a, eta_a)
        pref = -2.0 * eps ** (-3.5) / _TWO_PI3
        return (pref * param.jacobian * potential.phi_hat(h)
                * np.sin((h @ eta) / 2.0) * np.exp(logf))

    if t1 == 0.0:
        return np.zeros(n, dtype=complex)
    pref = (-eps ** (-4.0) / _TWO_PI6 if spec.kind == "T2"
            else -eps ** (-7.0) / _TWO_PI6)
    # exponent samples at three inner times pin the quadratic exactly
    tpts = (0.0, 0.5 * t1, t1)
    acc = np.zeros(n, dtype=complex)
    for s2 in (1.0, -1.0):
        if sigma2_filter is not None and s2 != sigma2_filter:
            continue
        for s1 in (1.0, -1.0):
            expo = []
            for t2 in tpts:
                xi_a, eta_a, phase = _term_args(spec.kind, eps, t1, t2,
                                                xi, eta, h1, h2)
                expo.append(_pair_log_hat(datum, eps, pi, xi_a, eta_a)
                            + 1j * phase(s1, s2))
            e0, em, e1 = expo
            a = 2.0 * (e0 - 2.0 * em + e1) / t1**2
            b = (-3.0 * e0 + 4.0 * em - e1) / t1
            seg = gauss_segment_integral(a, b, e0, t1)
            acc = acc + (s1 * s2) * seg
    return pref * param.jacobian * potential.phi_hat(h1) \
        * potential.phi_hat(h2) * acc


def _family_key(spec: TermSpec, param: _Param) -> tuple:
    return (param.family, round(spec.t1, 12))


def eval_terms_strata(specs: list[TermSpec], xi, eta, spec_q: QuadratureSpec,
                      datum: GaussianDatum, potential: GaussianPotential,
                      sigma2_filter=None) -> list[np.ndarray]:
    """Per-stratum estimates for several terms on family-shared streams.

    Terms in the same family see identical samples, so designed
    cancellations between them happen per sample when their per-stratum
    values are summed.  The statistics weight theta^{s(pi)} is included.
    """
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    sizes = stratum_sizes(spec_q.samples, spec_q.strata)
    out = []
    cache: dict = {}
    for spec in specs:
        if spec.kind == "FREE":
            val = complex(datum.f0_hat(xi, eta + xi * spec.t1))
            out.append(np.full(spec_q.strata, val, dtype=complex))
            continue
        param = _param_for(spec, datum, potential)
        key = _family_key(spec, param)
        if key not in cache:
            draws = []
            for s in range(spec_q.strata):
                rng = stream(spec_q.seed, "term", param.family,
                             round(spec.t1, 12), s)
                u1 = rng.standard_normal((sizes[s], 3)) / math.sqrt(param.p1)
                u2 = rng.standard_normal((sizes[s], 3)) / math.sqrt(param.p2)
                draws.append((u1, u2))
            cache[key] = draws
        draws = cache[key]
        weight = spec.permutation.sign(spec.statistics)
        per = np.empty(spec_q.strata, dtype=complex)
        for s, (u1, u2) in enumerate(draws):
            q1 = ((param.p1 / (2 * math.pi)) ** 1.5
                  * np.exp(-0.5 * param.p1 * np.sum(u1 * u1, axis=-1)))
            if param.single:
                flips = ((1.0,), (-1.0,))
                q = q1
            else:
                q2 = ((param.p2 / (2 * math.pi)) ** 1.5
                      * np.exp(-0.5 * param.p2 * np.sum(u2 * u2, axis=-1)))
                q = q1 * q2
                flips = ((1, 1), (1, -1), (-1, 1), (-1, -1))
            vals = np.zeros(u1.shape[0], dtype=complex)
            for fl in flips:
                f1 = fl[0]
                f2 = fl[-1] if len(fl) > 1 else 1.0
                vals = vals + _term_values(spec, datum, potential, xi, eta,
                                           f1 * u1, f2 * u2, param,
                                           sigma2_filter)
            vals /= len(flips)
            if not np.all(np.isfinite(vals)):
                bad = int(np.argmax(~np.isfinite(vals)))
                raise FloatingPointError(
                    f"non-finite {spec.kind} integrand at u1={u1[bad]}, "
                    f"u2={u2[bad]}")
            per[s] = weight * np.mean(vals / q)
        out.append(per)
    return out


def eval_term_eps(spec: TermSpec, xi, eta, quad: QuadratureSpec,
                  datum: GaussianDatum,
                  potential: GaussianPotential) -> tuple[complex, float]:
    """Value and MC error of one expansion term at (xi, eta, t1)."""
    if spec.kind == "FREE":
        val = complex(datum.f0_hat(np.asarray(xi, float),
                                   np.asarray(eta, float)
                                   + np.asarray(xi, float) * spec.t1))
        return val, 0.0
    per = eval_terms_strata([spec], xi, eta, quad, datum, potential)[0]
    return combine_strata(per)


def gauss_legendre_nodes(t: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * t * (x + 1.0), 0.5 * t * w


def assemble_g_eps_strata(epsilon: float, t: float, xi, eta,
                          statistics: Statistics, quad: QuadratureSpec,
                          datum: GaussianDatum,
                          potential: GaussianPotential,
                          t1_nodes: int = 8) -> tuple[complex, np.ndarray]:
    """Free term plus per-stratum interaction totals of the eps expansion.

    The outer time integral uses deterministic Gauss-Legendre nodes, so
    shared-seed evaluations across eps values stay MC-correlated.
    """
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    free = complex(datum.f0_hat(xi, eta + xi * t))
    strata = np.zeros(quad.strata, dtype=complex)
    if t == 0.0 or potential.amplitude == 0.0:
        return free, strata
    nodes, weights = gauss_legendre_nodes(t, t1_nodes)
    for t1, w in zip(nodes, weights):
        specs = term_specs_for(epsilon, t1, statistics)
        shift = xi * (t - t1)
        per = eval_terms_strata(specs, xi, eta + shift, quad, datum, potential)
        strata += w * np.sum(per, axis=0)
    return free, strata


def assemble_g_eps(epsilon: float, t: float, xi, eta,
                   statistics: Statistics, quad: QuadratureSpec,
                   datum: GaussianDatum, potential: GaussianPotential,
                   t1_nodes: int = 8) -> tuple[complex, float]:
    """Second-order eps-dependent transform at (xi, eta, t), with MC error."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    free, strata = assemble_g_eps_strata(epsilon, t, xi, eta, statistics,
                                         quad, datum, potential, t1_nodes)
    if t == 0.0 or potential.amplitude == 0.0:
        return free, 0.0
    val, err = combine_strata(strata)
    return free + val, err
