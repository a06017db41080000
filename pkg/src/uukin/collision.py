"""The quantum kinetic collision operator and homogeneous relaxation.

The collision rate on the momentum/energy-conserving sphere is

    W = (1/8π²) [phi_hat(v'-v) + theta*phi_hat(v'-v*)]²  × (delta pair)

and the full right-hand side carries the statistics brackets

    f' f'* (1+tf)(1+tf*) - f f* (1+tf')(1+tf'*)        t = 8π³ theta.

The apparent quartic terms cancel identically, so the operator is evaluated
internally in the expanded cubic form; the quartic-bracket route is kept for
the cancellation check.

States are velocity-box grids (full 3-d box, trilinear interpolation; no
isotropy assumed).  Velocities leaving the box contribute zero — the box is
sized so the neglected tail is far below the MC noise floor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .model import BOSE, FERMI, GaussianDatum, GaussianPotential, Statistics, \
    THETA_TILDE_FACTOR
from .quad import QuadratureSpec, CollisionPoint, collision_outgoing, \
    combine_strata, stratum_sizes, stream, uniform_sphere

_PAULI_TOL = 1e-9


class PauliBoundError(ValueError):
    """Fermi state exceeds the exclusion bound 8π³ f <= 1."""


class InstabilityError(RuntimeError):
    """Time stepper produced values outside the admissible range."""


@dataclass(frozen=True)
class KernelW:
    """Transition-rate weights built from the potential and statistics."""

    potential: GaussianPotential
    statistics: Statistics

    def bracket(self, v, v_star, v_prime, v_star_prime) -> np.ndarray:
        """phi_hat(v'-v) + theta*phi_hat(v'-v*); squared it is the rate shape."""
        ph = self.potential.phi_hat
        return ph(v_prime - v) + self.statistics.theta * ph(v_prime - v_star)

    def weight(self, v, v_star, v_prime, v_star_prime) -> np.ndarray:
        b = self.bracket(v, v_star, v_prime, v_star_prime)
        return b * b / (8.0 * math.pi**2)


def kernel_weight(k: KernelW, p: CollisionPoint) -> float:
    """(1/8π²)[phi_hat(v'-v)+theta phi_hat(v'-v*)]² times the sphere Jacobian."""
    return float(k.weight(p.v, p.v_star, p.v_prime, p.v_star_prime)
                 * p.jacobian_weight)


@dataclass(frozen=True)
class VelocityGrid:
    """Uniform velocity box with trilinear interpolation."""

    lo: tuple
    hi: tuple
    shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(x) for x in self.lo))
        object.__setattr__(self, "hi", tuple(float(x) for x in self.hi))
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        if any(n < 2 for n in self.shape):
            raise ValueError("grid needs at least 2 nodes per axis")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("hi must exceed lo")

    @staticmethod
    def cube(extent: float, n: int) -> "VelocityGrid":
        return VelocityGrid((-extent,) * 3, (extent,) * 3, (n,) * 3)

    @property
    def steps(self) -> np.ndarray:
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        n = np.asarray(self.shape)
        return (hi - lo) / (n - 1)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.steps))

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(l, h, n) for l, h, n in
                zip(self.lo, self.hi, self.shape)]

    def nodes(self) -> np.ndarray:
        ax = self.axes()
        g = np.meshgrid(*ax, indexing="ij")
        return np.stack([a.ravel() for a in g], axis=-1)

    def interpolate(self, values: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Trilinear interpolation; points outside the box evaluate to 0."""
        flat = np.ascontiguousarray(values.reshape(-1))
        pts = np.asarray(points)
        shape = pts.shape[:-1]
        pts = pts.reshape(-1, 3)
        n = np.asarray(self.shape)
        tx = (pts[:, 0] - self.lo[0]) / self.steps[0]
        ty = (pts[:, 1] - self.lo[1]) / self.steps[1]
        tz = (pts[:, 2] - self.lo[2]) / self.steps[2]
        inside = ((tx >= 0.0) & (tx <= n[0] - 1) & (ty >= 0.0)
                  & (ty <= n[1] - 1) & (tz >= 0.0) & (tz <= n[2] - 1))
        np.clip(tx, 0.0, n[0] - 1 - 1e-9, out=tx)
        np.clip(ty, 0.0, n[1] - 1 - 1e-9, out=ty)
        np.clip(tz, 0.0, n[2] - 1 - 1e-9, out=tz)
        ix = tx.astype(np.intp)
        iy = ty.astype(np.intp)
        iz = tz.astype(np.intp)
        fx = tx - ix
        fy = ty - iy
        fz = tz - iz
        sx = n[1] * n[2]
        sy = n[2]
        base = ix * sx + iy * sy + iz
        c00 = flat[base] * (1.0 - fz) + flat[base + 1] * fz
        c01 = flat[base + sy] * (1.0 - fz) + flat[base + sy + 1] * fz
        c10 = flat[base + sx] * (1.0 - fz) + flat[base + sx + 1] * fz
        c11 = flat[base + sx + sy] * (1.0 - fz) + flat[base + sx + sy + 1] * fz
        out = ((c00 * (1.0 - fy) + c01 * fy) * (1.0 - fx)
               + (c10 * (1.0 - fy) + c11 * fy) * fx)
        out[~inside] = 0.0
        return out.reshape(shape)


@dataclass
class CollisionState:
    """Spatially homogeneous distribution sampled on a velocity grid."""

    grid: VelocityGrid
    values: np.ndarray
    statistics: Statistics

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.values.size != int(np.prod(self.grid.shape)):
            raise ValueError("values do not match grid size")
        self.validate()

    def validate(self, tol: float = _PAULI_TOL):
        if self.values.min() < -tol:
            idx = int(np.argmin(self.values))
            raise ValueError(f"negative distribution value at node {idx}")
        if self.statistics.theta == -1:
            excess = THETA_TILDE_FACTOR * self.values.max() - 1.0
            if excess > tol:
                idx = int(np.argmax(self.values))
                raise PauliBoundError(
                    f"8π³ f = {1.0 + excess:.6f} > 1 at node {idx}")

    @staticmethod
    def from_function(grid: VelocityGrid, fn, statistics: Statistics
                      ) -> "CollisionState":
        return CollisionState(grid, fn(grid.nodes()), statistics)

    def interp(self, points: np.ndarray) -> np.ndarray:
        return self.grid.interpolate(self.values, points)

    def moments(self) -> dict:
        """Mass, momentum, kinetic energy by grid quadrature (per unit volume)."""
        nodes = self.grid.nodes()
        w = self.grid.cell_volume
        f = self.values
        return {
            "mass": float(w * f.sum()),
            "momentum": (w * (f[:, None] * nodes).sum(axis=0)).tolist(),
            "energy": float(w * (0.5 * f * np.sum(nodes**2, axis=-1)).sum()),
        }


class CallableState(CollisionState):
    """State backed by an exact callable profile (grid nodes kept for moments).

    Evaluation bypasses interpolation, so operator identities that hold for
    the analytic profile (equilibrium stationarity, bracket cancellations)
    are tested free of trilinear-interpolation bias.
    """

    def __init__(self, grid: VelocityGrid, fn, statistics: Statistics):
        self._fn = fn
        super().__init__(grid, fn(grid.nodes()), statistics)

    def interp(self, points: np.ndarray) -> np.ndarray:
        return self._fn(np.asarray(points, dtype=float))


def equilibrium(params: "EquilibriumParams", statistics: Statistics,
                v) -> np.ndarray:
    """Bose-Einstein / Fermi-Dirac profile M(v) = 1/(e^{βμ+βv²/2} - 8π³θ)."""
    th = statistics.theta
    ex = params.beta * params.mu + 0.5 * params.beta * np.sum(
        np.asarray(v, float) ** 2, axis=-1)
    if th == 1 and math.exp(params.beta * params.mu) <= THETA_TILDE_FACTOR:
        raise CondensationParamError(
            "Bose equilibrium needs e^{beta mu} > 8π³ (non-condensed region)")
    return 1.0 / (np.exp(ex) - THETA_TILDE_FACTOR * th)


class CondensationParamError(ValueError):
    """Equilibrium parameters inside the Bose condensation region."""


@dataclass(frozen=True)
class EquilibriumParams:
    beta: float
    mu: float

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")


def h_functional(state: CollisionState) -> float:
    """Entropy functional driving the flow to the Bose/Fermi equilibria.

    Grid quadrature (homogeneous: per unit volume) of

        f log f - (theta/8π³) (1 + 8π³θf) log(1 + 8π³θf).

    The 1/8π³ weight on the blocking term is forced by consistency: only
    with it does h'(f) = log(f/(1+8π³θf)), so that the collision bracket
    dissipates H and the stationary points are exactly the M(v) profiles.
    (Without it the classical limit would not reduce to ∫ f log f either.)
    """
    f = state.values
    th = state.statistics.theta
    tt = state.statistics.theta_tilde
    blocking = 1.0 + tt * f
    if np.any(blocking <= 0.0):
        idx = int(np.argmin(blocking))
        raise ValueError(f"1 + 8π³θf <= 0 at node {idx}")
    pos = f > 0.0
    term = np.zeros_like(f)
    term[pos] = f[pos] * np.log(f[pos])
    term -= (th / THETA_TILDE_FACTOR) * blocking * np.log(blocking)
    return float(state.grid.cell_volume * term.sum())


# ---------------------------------------------------------------------------
# Collision integral
# ---------------------------------------------------------------------------

def _brackets(kernel: KernelW, f, fs, fp, fsp, form: str) -> np.ndarray:
    tt = kernel.statistics.theta_tilde
    if form == "cubic":
        quadratic = fp * fsp - f * fs
        cubic = fp * fsp * (f + fs) - f * fs * (fp + fsp)
        return quadratic + tt * cubic
    if form == "quartic":
        return (fp * fsp * (1.0 + tt * f) * (1.0 + tt * fs)
                - f * fs * (1.0 + tt * fp) * (1.0 + tt * fsp))
    if form == "gain":
        # magnitude of the gain term alone: the collision scale
        return np.abs(fp * fsp * (1.0 + tt * f) * (1.0 + tt * fs))
    raise ValueError(f"unknown bracket form {form!r}")


def uu_rhs(kernel: KernelW, state: CollisionState, v, spec: QuadratureSpec,
           form: str = "cubic") -> tuple[float, float]:
    """Collision integral at velocity v: MC over (v*, sigma) with grid lookups.

    Returns (value, std_error).  The importance density for v* is uniform
    over the grid box; sigma is uniform on the sphere with antithetic
    mirroring (v' <-> v'*).
    """
    state.validate()
    v = np.asarray(v, dtype=float)
    lo = np.asarray(state.grid.lo)
    hi = np.asarray(state.grid.hi)
    vol = float(np.prod(hi - lo))
    fv = float(state.interp(v[None])[0])
    sizes = stratum_sizes(spec.samples, spec.strata)

    ph = kernel.potential.phi_hat
    th = kernel.statistics.theta

    def one_stratum(s: int) -> complex:
        rng = stream(spec.seed, "uu_rhs", s)
        n = sizes[s]
        vs = lo + (hi - lo) * rng.random((n, 3))
        sig = uniform_sphere(rng, n)
        vp, vsp = collision_outgoing(v, vs, sig)
        fp = state.interp(vp)
        fsp = state.interp(vsp)
        fs = state.interp(vs)
        a_fwd = ph(vp - v)
        a_rev = ph(vp - vs)
        ju = 0.25 * np.linalg.norm(v - vs, axis=-1)
        if form == "gain":
            w_fwd = (a_fwd + th * a_rev) ** 2 / (8.0 * math.pi**2)
            w_rev = (a_rev + th * a_fwd) ** 2 / (8.0 * math.pi**2)
            acc = ju * 0.5 * (w_fwd * _brackets(kernel, fv, fs, fp, fsp, "gain")
                              + w_rev * _brackets(kernel, fv, fs, fsp, fp, "gain"))
        else:
            acc = ju * _sym_bracket_rate(kernel, fv, fs, fp, fsp,
                                         a_fwd, a_rev, form)
        return complex(np.mean(acc) * vol * 4.0 * math.pi)

    per = [one_stratum(s) for s in range(spec.strata)]
    val, err = combine_strata(per)
    return float(val.real), err


def q_j_jplus1(f0: GaussianDatum, potential: GaussianPotential, x, v,
               t1: float, statistics: Statistics, spec: QuadratureSpec,
               tag: str = "q12") -> tuple[float, float]:
    """Gain-loss quadratic operator on the transported product at (x, v).

    ∫ dv* dσ (|v-v*|/4) W-shape (f' f'* - f f*) with f = f0(x - v t1, v) etc.
    """
    kernel = KernelW(potential, statistics)
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    sizes = stratum_sizes(spec.samples, spec.strata)
    env_scale = 1.4 * f0.sigma_v

    ph = potential.phi_hat
    th = statistics.theta

    def one_stratum(s: int) -> complex:
        rng = stream(spec.seed, tag, s)
        n = sizes[s]
        vs = f0.cv + env_scale * rng.standard_normal((n, 3))
        q = ((2 * math.pi) ** -1.5 / env_scale**3
             * np.exp(-0.5 * np.sum((vs - f0.cv) ** 2, axis=-1) / env_scale**2))
        sig = uniform_sphere(rng, n)
        f = f0.transported(x, v, t1)
        fs = f0.transported(x, vs, t1)
        vp, vsp = collision_outgoing(v, vs, sig)
        fp = f0.transported(x, vp, t1)
        fsp = f0.transported(x, vsp, t1)
        w_fwd = (ph(vp - v) + th * ph(vp - vs)) ** 2 / (8.0 * math.pi**2)
        w_rev = (ph(vsp - v) + th * ph(vsp - vs)) ** 2 / (8.0 * math.pi**2)
        ju = 0.25 * np.linalg.norm(v - vs, axis=-1)
        acc = 0.5 * ju * (w_fwd + w_rev) * (fp * fsp - f * fs)
        return complex(np.mean(acc / q) * 4.0 * math.pi)

    per = [one_stratum(s) for s in range(spec.strata)]
    val, err = combine_strata(per)
    return float(val.real), err


def q_j_jplus2(f0: GaussianDatum, potential: GaussianPotential, x, v,
               t1: float, statistics: Statistics, spec: QuadratureSpec,
               tag: str = "q13") -> tuple[float, float]:
    """theta-weighted cubic operator on the transported triple product at (x, v).

    8π³θ ∫ dv* dσ (|v-v*|/4) W-shape [(f+f*) f' f'* - (f'+f'*) f f*].
    """
    kernel = KernelW(potential, statistics)
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    sizes = stratum_sizes(spec.samples, spec.strata)
    env_scale = 1.4 * f0.sigma_v
    tt = statistics.theta_tilde

    ph = potential.phi_hat
    th = statistics.theta

    def one_stratum(s: int) -> complex:
        rng = stream(spec.seed, tag, s)
        n = sizes[s]
        vs = f0.cv + env_scale * rng.standard_normal((n, 3))
        q = ((2 * math.pi) ** -1.5 / env_scale**3
             * np.exp(-0.5 * np.sum((vs - f0.cv) ** 2, axis=-1) / env_scale**2))
        sig = uniform_sphere(rng, n)
        f = f0.transported(x, v, t1)
        fs = f0.transported(x, vs, t1)
        vp, vsp = collision_outgoing(v, vs, sig)
        fp = f0.transported(x, vp, t1)
        fsp = f0.transported(x, vsp, t1)
        w_fwd = (ph(vp - v) + th * ph(vp - vs)) ** 2 / (8.0 * math.pi**2)
        w_rev = (ph(vsp - v) + th * ph(vsp - vs)) ** 2 / (8.0 * math.pi**2)
        ju = 0.25 * np.linalg.norm(v - vs, axis=-1)
        acc = (0.5 * ju * (w_fwd + w_rev)
               * ((f + fs) * fp * fsp - (fp + fsp) * f * fs))
        return complex(np.mean(acc / q) * 4.0 * math.pi * tt)

    per = [one_stratum(s) for s in range(spec.strata)]
    val, err = combine_strata(per)
    return float(val.real), err


def collision_moments(kernel: KernelW, state: CollisionState,
                      spec: QuadratureSpec) -> dict:
    """MC moments ∫ uu_rhs(v) ψ(v) dv for ψ in {1, v, |v|²/2}, with errors.

    Joint 8-dimensional MC over (v, v*, sigma); also reports the gain-term
    magnitude as the collision scale the errors should be compared to.
    """
    state.validate()
    lo = np.asarray(state.grid.lo)
    hi = np.asarray(state.grid.hi)
    vol = float(np.prod(hi - lo))
    sizes = stratum_sizes(spec.samples, spec.strata)

    keys = ["mass", "mom_x", "mom_y", "mom_z", "energy", "gain_scale"]
    per = {k: [] for k in keys}
    for s in range(spec.strata):
        rng = stream(spec.seed, "moments", s)
        n = sizes[s]
        v = lo + (hi - lo) * rng.random((n, 3))
        vs = lo + (hi - lo) * rng.random((n, 3))
        sig = uniform_sphere(rng, n)
        vp, vsp = collision_outgoing(v, vs, sig)
        f = state.interp(v)
        fs = state.interp(vs)
        fp = state.interp(vp)
        fsp = state.interp(vsp)
        w = kernel.weight(v, vs, vp, vsp)
        ju = 0.25 * np.linalg.norm(v - vs, axis=-1)
        br = _brackets(kernel, f, fs, fp, fsp, "cubic")
        tt = kernel.statistics.theta_tilde
        gain = w * ju * np.abs(fp * fsp * (1.0 + tt * f) * (1.0 + tt * fs))
        base = w * ju * br
        meas = vol * vol * 4.0 * math.pi
        per["mass"].append(complex(np.mean(base) * meas))
        for d, key in enumerate(["mom_x", "mom_y", "mom_z"]):
            per[key].append(complex(np.mean(base * v[:, d]) * meas))
        per["energy"].append(complex(
            np.mean(base * 0.5 * np.sum(v**2, axis=-1)) * meas))
        per["gain_scale"].append(complex(np.mean(gain) * meas))

    out = {}
    for k in keys:
        val, err = combine_strata(per[k])
        out[k] = (float(val.real), err)
    return out


def _transported_samples(f0: GaussianDatum, t1: float,
                         rng: np.random.Generator, n: int):
    """(x, v, v*, sigma) importance draws for Fourier transforms of the
    collision operators on transported products (density returned too)."""
    sv = 1.3 * f0.sigma_v
    sx = 0.9 * f0.sigma_x
    v = f0.cv + sv * rng.standard_normal((n, 3))
    vs = f0.cv + sv * rng.standard_normal((n, 3))
    xc = f0.cx + 0.5 * t1 * (v + vs)
    x = xc + sx * rng.standard_normal((n, 3))
    sig = uniform_sphere(rng, n)
    q = ((2 * math.pi) ** -4.5 / (sv**6 * sx**3)
         * np.exp(-0.5 * (np.sum((v - f0.cv) ** 2, -1)
                          + np.sum((vs - f0.cv) ** 2, -1)) / sv**2
                  - 0.5 * np.sum((x - xc) ** 2, -1) / sx**2))
    return x, v, vs, sig, q


def _q_path_hat(order: int, f0: GaussianDatum, potential: GaussianPotential,
                xi, eta, t1: float, statistics: Statistics,
                spec: QuadratureSpec) -> tuple[complex, float]:
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    kernel = KernelW(potential, statistics)
    th = statistics.theta
    ph = potential.phi_hat
    sizes = stratum_sizes(spec.samples, spec.strata)
    per = []
    for s in range(spec.strata):
        rng = stream(spec.seed, f"qpath{order}", round(t1, 12), s)
        n = sizes[s]
        x, v, vs, sig, q = _transported_samples(f0, t1, rng, n)
        vp, vsp = collision_outgoing(v, vs, sig)
        f = f0.transported(x, v, t1)
        fs = f0.transported(x, vs, t1)
        fp = f0.transported(x, vp, t1)
        fsp = f0.transported(x, vsp, t1)
        a_fwd = ph(vp - v)
        a_rev = ph(vp - vs)
        w_sym = 0.5 * ((a_fwd + th * a_rev) ** 2
                       + (a_rev + th * a_fwd) ** 2) / (8.0 * math.pi**2)
        ju = 0.25 * np.linalg.norm(v - vs, axis=-1)
        if order == 1:
            br = fp * fsp - f * fs
            pref = 1.0
        else:
            br = (f + fs) * fp * fsp - (fp + fsp) * f * fs
            pref = statistics.theta_tilde
        phase = np.exp(-1j * (x @ xi) - 1j * (v @ eta))
        per.append(complex(np.mean(pref * ju * w_sym * br * phase / q)
                           * 4.0 * math.pi))
    return combine_strata(per)


def q_j_jplus1_hat(f0: GaussianDatum, potential: GaussianPotential, xi, eta,
                   t1: float, statistics: Statistics,
                   spec: QuadratureSpec) -> tuple[complex, float]:
    """Fourier transform over (x, v) of q_j_jplus1 on transported products.

    Independent-path harness surface: the transition rate enters as the
    full square (phi_hat + theta phi_hat')²/(8π²), not as the per-term
    kernels of the limit evaluators.
    """
    return _q_path_hat(1, f0, potential, xi, eta, t1, statistics, spec)


def q_j_jplus2_hat(f0: GaussianDatum, potential: GaussianPotential, xi, eta,
                   t1: float, statistics: Statistics,
                   spec: QuadratureSpec) -> tuple[complex, float]:
    """Fourier transform over (x, v) of q_j_jplus2 on transported products."""
    return _q_path_hat(2, f0, potential, xi, eta, t1, statistics, spec)


# ---------------------------------------------------------------------------
# Homogeneous relaxation
# ---------------------------------------------------------------------------

def _conservative_projection(grid: VelocityGrid, f: np.ndarray,
                             targets: dict) -> tuple[np.ndarray, float]:
    """Restore mass/momentum/energy by a multiplicative affine correction.

    f -> f (1 + a + b·v + c|v|²) with (a, b, c) solved from the five moment
    constraints; the correction absorbs the collision quadrature noise,
    which would otherwise random-walk the conserved moments.  Returns the
    corrected values and the correction magnitude max|1-factor|.
    """
    nodes = grid.nodes()
    w = grid.cell_volume
    basis = np.concatenate(
        [np.ones((nodes.shape[0], 1)), nodes, np.sum(nodes**2, -1, keepdims=True)],
        axis=1)                                                   # (N, 5)
    moments = w * basis.T @ f                                     # current (5,)
    want = np.array([targets["mass"], *[p for p in targets["momentum"]],
                     2.0 * targets["energy"]])
    gram = w * (basis.T * f) @ basis                              # (5,5)
    try:
        lam = np.linalg.solve(gram, want - moments)
    except np.linalg.LinAlgError:
        return f, 0.0
    factor = 1.0 + basis @ lam
    corr = float(np.max(np.abs(factor - 1.0)))
    if corr > 0.2:
        # quadrature noise far too large to absorb; leave f untouched
        return f, corr
    return np.clip(f * factor, 0.0, None), corr


@dataclass
class RelaxTrajectory:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    h_values: list = field(default_factory=list)
    moments: list = field(default_factory=list)
    moment_sigma: list = field(default_factory=list)  # per-step MC sigma of dt*dM
    h_sigma: list = field(default_factory=list)       # per-step MC sigma of dH
    projection_size: list = field(default_factory=list)
    terminated_early: bool = False
    termination_reason: str = ""

    def rows(self):
        for i, t in enumerate(self.times):
            m = self.moments[i]
            yield {"time": t, "mass": m["mass"],
                   "momentum_x": m["momentum"][0],
                   "momentum_y": m["momentum"][1],
                   "momentum_z": m["momentum"][2],
                   "energy": m["energy"], "H": self.h_values[i]}


def _sym_bracket_rate(kernel: KernelW, f, fs, fp, fsp, a_fwd, a_rev,
                      form: str = "cubic") -> np.ndarray:
    """sigma-antithetic rate: mirroring sigma swaps (v', v'*), so both signs
    reuse one primed evaluation.  a_fwd = phi_hat(v'-v), a_rev = phi_hat(v'-v*);
    by momentum conservation the mirrored pair sees them exchanged.
    """
    th = kernel.statistics.theta
    w_fwd = (a_fwd + th * a_rev) ** 2 / (8.0 * math.pi**2)
    w_rev = (a_rev + th * a_fwd) ** 2 / (8.0 * math.pi**2)
    b_fwd = _brackets(kernel, f, fs, fp, fsp, form)
    b_rev = _brackets(kernel, f, fs, fsp, fp, form)
    return 0.5 * (w_fwd * b_fwd + w_rev * b_rev)


def _draw_pairs(grid: VelocityGrid, values: np.ndarray,
                rng: np.random.Generator, mc_pairs: int,
                uniform_frac: float = 0.25):
    """Antithetic (v*, sigma) importance set over the grid box.

    v* is drawn from a mixture of the (symmetrized) cell-weighted state
    density and a uniform floor over the box; the floor keeps the gain term
    covered where the distribution vanishes.  The second half mirrors the
    first through the box center (and flips sigma), so odd noise components
    cancel per draw.  Returns (v*, sigma, 1/q(v*)).
    """
    if mc_pairs % 2:
        mc_pairs += 1
    lo = np.asarray(grid.lo)
    hi = np.asarray(grid.hi)
    vol = float(np.prod(hi - lo))
    m2 = mc_pairs // 2

    w = np.maximum(values, 0.0)
    w = w + w[::-1]  # symmetrize under v -> -v (node order reverses exactly)
    total = w.sum()
    steps = grid.steps
    nodes = grid.nodes()
    if total <= 0.0:
        uniform_frac = 1.0
        probs = None
    else:
        probs = w / total

    n_adapt = int(round((1.0 - uniform_frac) * m2))
    picks = []
    if n_adapt > 0 and probs is not None:
        idx = rng.choice(probs.size, size=n_adapt, p=probs)
        jitter = (rng.random((n_adapt, 3)) - 0.5) * steps
        picks.append(nodes[idx] + jitter)
    n_unif = m2 - n_adapt
    if n_unif > 0:
        picks.append(lo + (hi - lo) * rng.random((n_unif, 3)))
    vs_half = np.concatenate(picks) if len(picks) > 1 else picks[0]
    sig_half = uniform_sphere(rng, m2)
    # order as [set A, mirror A, set B, mirror B]: the half-split used for
    # noise estimation then compares two independent antithetic sets
    ia, ib = slice(0, None, 2), slice(1, None, 2)
    vs = np.concatenate([vs_half[ia], (lo + hi) - vs_half[ia],
                         vs_half[ib], (lo + hi) - vs_half[ib]])
    sig = np.concatenate([sig_half[ia], -sig_half[ia],
                          sig_half[ib], -sig_half[ib]])

    # mixture density at the drawn points: nearest-node cell weight + floor
    q = np.full(vs.shape[0], uniform_frac / vol)
    if probs is not None and uniform_frac < 1.0:
        cell = np.rint((vs - lo) / steps).astype(int)
        cell = np.clip(cell, 0, np.asarray(grid.shape) - 1)
        flat = cell[:, 0] * grid.shape[1] * grid.shape[2] \
            + cell[:, 1] * grid.shape[2] + cell[:, 2]
        q = q + (1.0 - uniform_frac) * probs[flat] / grid.cell_volume
    return vs, sig, 1.0 / q


def _rhs_on_grid_numpy(kernel: KernelW, grid: VelocityGrid, values: np.ndarray,
                       vs_all: np.ndarray, sig_all: np.ndarray,
                       qinv: np.ndarray,
                       node_chunk: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    nodes = grid.nodes()
    mc_pairs = vs_all.shape[0]
    f_at = lambda pts: grid.interpolate(values, pts)
    fs_all = f_at(vs_all)
    ph = kernel.potential.phi_hat

    rhs = np.empty(nodes.shape[0])
    half = np.empty(nodes.shape[0])
    m2 = mc_pairs // 2
    meas = 4.0 * math.pi
    for start in range(0, nodes.shape[0], node_chunk):
        v = nodes[start:start + node_chunk, None, :]            # (c,1,3)
        f = values[start:start + node_chunk, None]
        vs = vs_all[None, :, :]
        vp, vsp = collision_outgoing(v, vs, sig_all[None, :, :])
        fp = f_at(vp)
        fsp = f_at(vsp)
        a_fwd = ph(vp - v)
        a_rev = ph(vp - vs)
        rel = v - vs
        ju = 0.25 * np.sqrt(np.sum(rel * rel, axis=-1))
        acc = qinv[None, :] * ju * _sym_bracket_rate(
            kernel, f, fs_all[None, :], fp, fsp, a_fwd, a_rev)
        rhs[start:start + node_chunk] = acc.mean(axis=1) * meas
        half[start:start + node_chunk] = (acc[:, :m2].mean(axis=1)
                                          - acc[:, m2:].mean(axis=1)) * meas
    return rhs, half


def _rhs_on_grid(kernel: KernelW, grid: VelocityGrid, values: np.ndarray,
                 pairs: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Collision right-hand side on every grid node.

    One antithetic (v*, sigma) importance set, `pairs = (v*, sigma, 1/q)`,
    is shared across all nodes.  Returns (rhs, half_diff) where the
    half-set difference feeds the quadrature noise estimate.
    """
    vs_all, sig_all, qinv = pairs
    from . import _gridkernel

    if not _gridkernel.HAVE_NUMBA:
        return _rhs_on_grid_numpy(kernel, grid, values, vs_all, sig_all, qinv)
    nodes = grid.nodes()
    fs_all = grid.interpolate(values, vs_all)
    pot = kernel.potential
    pref = pot.amplitude * (2.0 * math.pi) ** 1.5 * pot.width**3
    n0, n1, n2 = grid.shape
    st = grid.steps
    rhs = np.empty(nodes.shape[0])
    half = np.empty(nodes.shape[0])
    _gridkernel.rhs_kernel(
        np.ascontiguousarray(values.reshape(-1)), n0, n1, n2,
        grid.lo[0], grid.lo[1], grid.lo[2], st[0], st[1], st[2],
        nodes, values.reshape(-1), vs_all, fs_all, sig_all, qinv,
        float(kernel.statistics.theta), kernel.statistics.theta_tilde,
        pref, pot.width**2, 4.0 * math.pi, rhs, half)
    return rhs, half


def relax(kernel: KernelW, initial: CollisionState, dt: float, steps: int,
          spec: QuadratureSpec, mc_pairs: int = 512,
          conserve_moments: bool = True, frozen_quadrature: bool = True,
          keep_states: bool = False) -> RelaxTrajectory:
    """Classical 4-stage explicit time stepping of the homogeneous equation.

    Stability heuristic (documented, checked on the first step): dt times
    the collision-frequency scale max|rhs|/max f must stay below ~0.5.
    Records mass/momentum/energy, the H-functional, and per-step MC noise
    estimates (from paired independent quadrature half-sets).

    With frozen_quadrature (default) one (v*, sigma) importance set drives
    the whole run: the scheme is then a deterministic velocity-set ODE, the
    entropy decays smoothly along its flow, and the collision quadrature
    error is coherent in time (accounted linearly, not as a random walk).
    With conserve_moments the quadrature error in the five conserved
    moments is absorbed by a multiplicative affine projection each step
    (the correction size is recorded); otherwise the moments drift with it.
    Terminates early on a Fermi-bound violation, aborts on instability.
    """
    grid = initial.grid
    stat = initial.statistics
    f = initial.values.copy()
    traj = RelaxTrajectory()

    def record(t, fvals):
        st = CollisionState(grid, np.clip(fvals, 0.0, None), stat)
        traj.times.append(t)
        traj.h_values.append(h_functional(st))
        traj.moments.append(st.moments())
        if keep_states:
            traj.states.append(st)

    record(0.0, f)
    targets = traj.moments[0]
    neg_tol = 1e-6 * max(f.max(), 1e-300)
    w = grid.cell_volume
    nodes2 = 0.5 * np.sum(grid.nodes() ** 2, axis=-1)
    pairs = None
    if frozen_quadrature:
        # one importance set, adapted to the initial state, drives the run
        rng = stream(spec.seed, "relax", "frozen")
        pairs = _draw_pairs(grid, f, rng, mc_pairs)
    for step in range(steps):
        if not frozen_quadrature:
            rng = stream(spec.seed, "relax", step)
            pairs = _draw_pairs(grid, f, rng, mc_pairs)
        k_stages = []
        halves = []
        fs = f
        for stage, frac in enumerate((0.0, 0.5, 0.5, 1.0)):
            if stage > 0:
                fs = np.clip(f + frac * dt * k_stages[-1], 0.0, None)
            k, half = _rhs_on_grid(kernel, grid, fs, pairs)
            k_stages.append(k)
            halves.append(half)
            if stage == 0 and step == 0:
                freq = dt * np.max(np.abs(k)) / max(f.max(), 1e-300)
                if freq > 0.5:
                    raise InstabilityError(
                        f"dt * collision frequency = {freq:.2f} too large")
        k_mean = (k_stages[0] + 2 * k_stages[1] + 2 * k_stages[2]
                  + k_stages[3]) / 6.0
        half = (halves[0] + 2 * halves[1] + 2 * halves[2] + halves[3]) / 6.0
        f_new = f + dt * k_mean
        if f_new.min() < -max(neg_tol, 1e-4 * f_new.max()):
            raise InstabilityError(
                f"negative values beyond tolerance at step {step}: "
                f"min f = {f_new.min():.3e}")
        f_new = np.clip(f_new, 0.0, None)

        # step noise estimates from the two independent quadrature half-sets
        st_a = CollisionState(grid, np.clip(f + dt * (k_mean + half / 2),
                                            0.0, None), stat)
        st_b = CollisionState(grid, np.clip(f + dt * (k_mean - half / 2),
                                            0.0, None), stat)
        traj.h_sigma.append(0.5 * abs(h_functional(st_a) - h_functional(st_b)))
        dm = 0.5 * dt * w * np.array([
            half.sum(),
            *(half @ grid.nodes()),
            (half @ nodes2)])
        traj.moment_sigma.append(dm)

        corr = 0.0
        if conserve_moments:
            f_new, corr = _conservative_projection(grid, f_new, targets)
        traj.projection_size.append(corr)
        f = f_new
        if stat.theta == -1 and THETA_TILDE_FACTOR * f.max() > 1.0 + _PAULI_TOL:
            traj.terminated_early = True
            traj.termination_reason = f"Fermi bound violated at step {step}"
            record((step + 1) * dt, f)
            return traj
        record((step + 1) * dt, f)
    return traj


# ---------------------------------------------------------------------------
# Trajectory / snapshot serialization
# ---------------------------------------------------------------------------

def write_trajectory_csv(path: str, traj: RelaxTrajectory):
    cols = ["time", "mass", "momentum_x", "momentum_y", "momentum_z",
            "energy", "H"]
    with open(path, "w") as fh:
        fh.write("# uukin-schema 1\n")
        fh.write(",".join(cols) + "\n")
        for row in traj.rows():
            fh.write(",".join(f"{row[c]:.17g}" for c in cols) + "\n")


def write_state_snapshot(prefix: str, state: CollisionState):
    """Flat little-endian float64 array plus a JSON sidecar with the geometry."""
    data = np.ascontiguousarray(state.values, dtype="<f8")
    with open(prefix + ".bin", "wb") as fh:
        fh.write(data.tobytes())
    sidecar = {
        "byte_order": "little-endian",
        "dtype": "float64",
        "ordering": "C (x fastest varying last)",
        "lo": list(state.grid.lo),
        "hi": list(state.grid.hi),
        "shape": list(state.grid.shape),
        "statistics": state.statistics.name,
    }
    with open(prefix + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)


def read_state_snapshot(prefix: str) -> CollisionState:
    with open(prefix + ".json") as fh:
        meta = json.load(fh)
    grid = VelocityGrid(tuple(meta["lo"]), tuple(meta["hi"]),
                        tuple(meta["shape"]))
    vals = np.frombuffer(open(prefix + ".bin", "rb").read(), dtype="<f8")
    stat = BOSE if meta["statistics"] == "bose" else FERMI
    return CollisionState(grid, vals.copy(), stat)
