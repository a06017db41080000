"""Quasi-free Bose states from a one-particle operator.

A finite Hermitian PSD matrix r stands in for the one-particle kernel
(orthonormal-mode truncation; all statements here are trace identities, so
they are exactly testable in finite dimension).  The grand-canonical state
built from r at activity z has

    partition function   Xi(z) = exp( sum_{j>=1} Tr(r^j) z^j / j )
    mean particle number <N>   = Tr( z r (1 - z r)^{-1} )
    reduced density matrices
        rho_j(X; Y) = sum_{pi in P_j} prod_i r_z[x_i, y_pi(i)],
        r_z = z r (1 - z r)^{-1}

valid for z * spectral_radius(r) < 1 (away from the condensation region).
The brute-force routes enumerate permutations and Fock sectors explicitly
and are kept as oracles for the closed forms.  Bose only; the Fermi
analogue (determinantal) is out of scope.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

_HERMITICITY_TOL = 1e-12
_EIG_FLOOR = -1e-12
_FACTORIAL_GUARD = 20  # n! overflows 64-bit at n = 21; exact ints beyond via Python


class CondensationRegionError(ValueError):
    """z * spectral_radius(r) >= 1: outside the quasi-free construction."""


@dataclass(frozen=True)
class OnePartOperator:
    """Finite Hermitian positive-semidefinite one-particle operator."""

    matrix: tuple  # nested tuple storage to stay hashable/frozen

    def __init__(self, matrix):
        m = np.asarray(matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("matrix must be square")
        if m.shape[0] < 1:
            raise ValueError("dim must be >= 1")
        herm = np.max(np.abs(m - m.conj().T)) if m.size else 0.0
        if herm > _HERMITICITY_TOL:
            raise ValueError(f"matrix not Hermitian (deviation {herm:.2e})")
        eigs = np.linalg.eigvalsh(m)
        if eigs.min() < _EIG_FLOOR:
            raise ValueError(f"matrix not PSD (min eigenvalue {eigs.min():.2e})")
        object.__setattr__(self, "matrix", tuple(map(tuple, m.tolist())))

    @property
    def dim(self) -> int:
        return len(self.matrix)

    @property
    def mat(self) -> np.ndarray:
        return np.asarray(self.matrix, dtype=complex)

    @property
    def spectral_radius(self) -> float:
        return float(np.linalg.eigvalsh(self.mat).max())


@dataclass(frozen=True)
class Activity:
    z: float

    def __post_init__(self):
        if self.z <= 0:
            raise ValueError("activity must be positive")


def _check_radius(r: OnePartOperator, z: Activity):
    zr = z.z * r.spectral_radius
    if zr >= 1.0:
        raise CondensationRegionError(
            f"z * spectral_radius = {zr:.6f} >= 1 (condensation region)")


@dataclass(frozen=True)
class CycleType:
    """alpha[j-1] = number of j-cycles; sum of j*alpha[j-1] gives n."""

    alpha: tuple

    def __post_init__(self):
        a = tuple(int(x) for x in self.alpha)
        object.__setattr__(self, "alpha", a)
        if any(x < 0 for x in a):
            raise ValueError("cycle counts must be nonnegative")

    @property
    def n(self) -> int:
        return sum((j + 1) * a for j, a in enumerate(self.alpha))


def cycle_count(n: int, alpha: CycleType) -> int:
    """Number of permutations of n elements with the given cycle type.

    n! / prod_j (alpha_j! * j^alpha_j), exact integer arithmetic.
    """
    if n > _FACTORIAL_GUARD:
        raise ValueError(f"n must be <= {_FACTORIAL_GUARD}")
    if alpha.n != n:
        raise ValueError(f"cycle type sums to {alpha.n}, expected {n}")
    denom = 1
    for j, a in enumerate(alpha.alpha, start=1):
        denom *= math.factorial(a) * j**a
    num = math.factorial(n)
    assert num % denom == 0
    return num // denom


def all_cycle_types(n: int):
    """All cycle types of P_n (integer partitions of n, as count vectors)."""

    def partitions(remaining, max_part):
        if remaining == 0:
            yield []
            return
        for part in range(min(remaining, max_part), 0, -1):
            for rest in partitions(remaining - part, part):
                yield [part] + rest

    for parts in partitions(n, n):
        alpha = [0] * n
        for p in parts:
            alpha[p - 1] += 1
        yield CycleType(tuple(alpha))


def _cycles_of(perm: tuple) -> list[list[int]]:
    seen = [False] * len(perm)
    cycles = []
    for start in range(len(perm)):
        if seen[start]:
            continue
        cyc = []
        k = start
        while not seen[k]:
            seen[k] = True
            cyc.append(k)
            k = perm[k]
        cycles.append(cyc)
    return cycles


def xi_cycle(r: OnePartOperator, z: Activity, rtol: float = 1e-14) -> float:
    """Partition function via the cycle series exp(sum_j Tr(r^j) z^j / j).

    The series is summed until the geometric tail bound drops below rtol of
    the running value.
    """
    _check_radius(r, z)
    zrho = z.z * r.spectral_radius
    m = r.mat
    power = np.eye(r.dim, dtype=complex)
    acc = 0.0
    j = 0
    while True:
        j += 1
        power = power @ m
        acc += float(np.trace(power).real) * z.z**j / j
        # tail <= dim * (z rho)^{j+1} / ((j+1) (1 - z rho))
        tail = r.dim * zrho ** (j + 1) / ((j + 1) * (1.0 - zrho))
        if tail < rtol * max(1.0, abs(acc)) or j > 10000:
            break
    return math.exp(acc)


def xi_brute(r: OnePartOperator, z: Activity, n_max: int) -> float:
    """Partition function by explicit permutation enumeration per Fock sector.

    sum_{n<=n_max} z^n/n! sum_{pi in P_n} prod over cycles of Tr(r^len).
    """
    if n_max > 8:
        raise ValueError("n_max must be <= 8 (factorial guard)")
    m = r.mat
    tr_pow = [None] + [complex(np.trace(np.linalg.matrix_power(m, k)))
                       for k in range(1, n_max + 1)]
    total = 1.0
    for n in range(1, n_max + 1):
        sector = 0.0 + 0.0j
        for perm in itertools.permutations(range(n)):
            prod = 1.0 + 0.0j
            for cyc in _cycles_of(perm):
                prod *= tr_pow[len(cyc)]
            sector += prod
        total += (z.z**n / math.factorial(n)) * sector.real
    return total


def mean_n(r: OnePartOperator, z: Activity) -> float:
    """<N> = Tr( z r (1 - z r)^{-1} ), via the eigenvalue occupation sum."""
    _check_radius(r, z)
    eigs = np.linalg.eigvalsh(r.mat)
    occ = z.z * eigs / (1.0 - z.z * eigs)
    return float(np.sum(occ))


def r_z(r: OnePartOperator, z: Activity) -> OnePartOperator:
    """One-particle operator z r (1 - z r)^{-1} of the quasi-free RDMs.

    Computed by solving (1 - z r) X = z r (no explicit inverse); rejects
    conditioning worse than 1e12.
    """
    _check_radius(r, z)
    m = r.mat
    lhs = np.eye(r.dim) - z.z * m
    if np.linalg.cond(lhs) > 1e12:
        raise CondensationRegionError("1 - z r too ill-conditioned to invert")
    out = np.linalg.solve(lhs, z.z * m)
    out = 0.5 * (out + out.conj().T)  # re-symmetrize roundoff
    return OnePartOperator(out)


def rdm_closed(r: OnePartOperator, z: Activity, j: int, X, Y) -> complex:
    """rho_j(X; Y) = sum over P_j of prod_i r_z[x_i, y_pi(i)]."""
    if j > 4:
        raise ValueError("j must be <= 4")
    X = list(X)
    Y = list(Y)
    if len(X) != j or len(Y) != j:
        raise ValueError("X and Y must hold j indices")
    rz = r_z(r, z).mat
    if any(not 0 <= i < r.dim for i in X + Y):
        raise IndexError("mode index out of range")
    total = 0.0 + 0.0j
    for perm in itertools.permutations(range(j)):
        prod = 1.0 + 0.0j
        for i in range(j):
            prod *= rz[X[i], Y[perm[i]]]
        total += prod
    return total


def rdm_brute(r: OnePartOperator, z: Activity, j: int, X, Y,
              n_max: int) -> tuple[complex, float]:
    """Defining Fock-sector sum for rho_j with explicit permutations.

    Sector n contributes z^{n+j}/n! times the sum over P_{n+j} of the chain
    contraction with n auxiliary (traced) indices; cycles avoiding the open
    indices contract to traces, cycles through them to r-power chain entries.
    Normalized by the closed-form partition function.

    Returns (value, tail_bound) where tail_bound is the empirical geometric
    bound |last increment| * q/(1-q), q = z * spectral_radius.
    """
    if j + n_max > 8:
        raise ValueError("j + n_max must be <= 8")
    X = list(X)
    Y = list(Y)
    if len(X) != j or len(Y) != j:
        raise ValueError("X and Y must hold j indices")
    _check_radius(r, z)
    m = r.mat
    kmax = j + n_max + 1
    powers = [np.eye(r.dim, dtype=complex)]
    for _ in range(kmax):
        powers.append(powers[-1] @ m)
    xi = xi_cycle(r, z)

    total = 0.0 + 0.0j
    last = 0.0
    for n in range(n_max + 1):
        size = j + n
        sector = 0.0 + 0.0j
        for perm in itertools.permutations(range(size)):
            prod = 1.0 + 0.0j
            for cyc in _cycles_of(perm):
                open_pos = [i for i in cyc if i < j]
                if not open_pos:
                    prod *= complex(np.trace(powers[len(cyc)]))
                    continue
                # walk the cycle from each open position to the next one;
                # intermediate auxiliary indices contract to matrix powers
                for start in open_pos:
                    steps = 1
                    k = perm[start]
                    while k >= j:
                        steps += 1
                        k = perm[k]
                    prod *= powers[steps][X[start], Y[k]]
            sector += prod
        inc = (z.z ** (n + j) / math.factorial(n)) * sector
        total += inc
        last = abs(inc)
    q = z.z * r.spectral_radius
    tail_bound = last * q / (1.0 - q)
    return total / xi, tail_bound
