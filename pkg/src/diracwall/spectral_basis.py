"""Transverse Hermite basis, Legendre quadrature, waveguide modes and overlaps.

Throughout, a spinor field restricted to the Hermite levels ``0..n_y`` is stored
in *channel coordinates*: a vector of length ``D = 2*n_y + 1`` whose entry
``2k`` holds the lower spinor component on level ``k`` and entry ``2k + 1``
holds the upper spinor component on level ``k``. The free operator couples only
the pair (upper level ``n-1``, lower level ``n``), which we call channel ``n``;
channel 0 is the lone lower level-0 slot.
"""

from dataclasses import dataclass
from functools import lru_cache
from math import factorial
from typing import NamedTuple

import numpy as np
from numpy.polynomial import hermite as _np_hermite
from numpy.polynomial import legendre as _np_legendre

from ._kernels import hermite_table

PAULI = np.array(
    [
        [[1, 0], [0, 1]],
        [[0, 1], [1, 0]],
        [[0, -1j], [1j, 0]],
        [[1, 0], [0, -1]],
    ],
    dtype=complex,
)

BAND_EDGE_TOL = 1e-9
DUAL_TOL = 1e-8


class BandEdgeError(ValueError):
    """Raised when an energy sits on a threshold E**2 == 2n."""


class IllConditionedDualBasis(ValueError):
    """Raised when the two profiles of a level are nearly parallel."""


# ------------------------------------------------------------------ quadrature


def gauss_legendre(n, a=-1.0, b=1.0):
    """Gauss-Legendre nodes and weights on ``[a, b]``."""
    t, w = _np_legendre.leggauss(n)
    half = 0.5 * (b - a)
    return 0.5 * (a + b) + half * t, half * w


def gauss_hermite(n, scale=1.0):
    """Nodes and weights for ``int f(y) exp(-scale*y**2) dy``."""
    t, w = _np_hermite.hermgauss(n)
    r = np.sqrt(scale)
    return t / r, w / r


def legendre_table(j_max, t):
    """Standard Legendre polynomials ``P_0..P_j_max`` at reference points ``t``."""
    t = np.asarray(t, dtype=float)
    out = np.empty((j_max + 1,) + t.shape)
    out[0] = 1.0
    if j_max >= 1:
        out[1] = t
    for j in range(1, j_max):
        out[j + 1] = ((2 * j + 1) * t * out[j] - j * out[j - 1]) / (j + 1)
    return out


def to_reference(x, interval):
    a, b = interval
    return (2.0 * np.asarray(x, dtype=float) - (a + b)) / (b - a)


# ------------------------------------------------------------------ Hermite basis


def hermite_functions(n_max, y):
    """Normalized Hermite functions ``phi_0..phi_n_max`` evaluated at ``y``."""
    return hermite_table(int(n_max), np.asarray(y))


def scaled_hermite_functions(n_max, y):
    """``sqrt(2) pi**(1/4) phi_k(sqrt(2) y)``, the profiles used for scalar potentials."""
    y = np.asarray(y, dtype=float)
    return np.sqrt(2.0) * np.pi**0.25 * hermite_table(int(n_max), np.sqrt(2.0) * y)


def y_profiles(kind, n_k, y):
    """Transverse potential profiles: ``hermite``, ``scaled`` or ``uniform``."""
    y = np.asarray(y, dtype=float)
    if kind == "hermite":
        return hermite_functions(n_k, y)
    if kind == "scaled":
        return scaled_hermite_functions(n_k, y)
    if kind == "uniform":
        return np.ones((1,) + y.shape)
    raise ValueError(f"unknown y basis {kind!r}")


@dataclass(frozen=True)
class HermiteBasis:
    """Hermite functions up to ``n_y`` sampled on a Gauss-Hermite grid.

    ``weights`` already include the factor ``exp(y**2)``, so that
    ``sum(weights * f * g)`` approximates ``int f g dy`` for decaying ``f, g``.
    """

    n_y: int
    nodes: np.ndarray
    weights: np.ndarray
    values: np.ndarray

    @classmethod
    def build(cls, n_y, n_quad=None):
        if n_y < 0:
            raise ValueError("n_y must be non-negative")
        n_quad = max(n_quad or 0, 2 * n_y + 8)
        y, w = gauss_hermite(n_quad)
        weights = w * np.exp(y * y)
        return cls(n_y, y, weights, hermite_functions(n_y, y))

    def gram(self):
        return (self.values * self.weights) @ self.values.T

    def lower(self, coeffs):
        """Apply ``a = y + d/dy`` to a coefficient vector (``a phi_n = sqrt(2n) phi_{n-1}``)."""
        c = np.asarray(coeffs)
        out = np.zeros_like(c, dtype=np.result_type(c, float))
        n = np.arange(1, len(c))
        out[:-1] = np.sqrt(2.0 * n) * c[1:]
        return out

    def raise_(self, coeffs):
        """Apply ``a* = y - d/dy``; the top level is truncated."""
        c = np.asarray(coeffs)
        out = np.zeros_like(c, dtype=np.result_type(c, float))
        n = np.arange(0, len(c) - 1)
        out[1:] = np.sqrt(2.0 * (n + 1)) * c[:-1]
        return out


# ------------------------------------------------------------------ channels


def channel_size(n_y):
    return 2 * n_y + 1


def slot(spinor, level):
    """Channel-coordinate index of (spinor component, Hermite level); spinor 0 is upper."""
    return 2 * level + 1 if spinor == 0 else 2 * level


def slot_channel(n_y):
    """Channel number of every slot; upper level k lives in channel k+1."""
    d = channel_size(n_y)
    idx = np.arange(d)
    return np.where(idx % 2 == 0, idx // 2, idx // 2 + 1)


def slot_partner(n_y):
    """Index of the other slot in the same channel, or -1 for channel 0."""
    d = channel_size(n_y)
    partner = np.full(d, -1, dtype=np.int64)
    for n in range(1, n_y + 1):
        partner[2 * n - 1], partner[2 * n] = 2 * n, 2 * n - 1
    return partner


# ------------------------------------------------------------------ modes


class ModeIndex(NamedTuple):
    n: int
    eps: int


def branch_sqrt(z):
    """Square root with sqrt(negative) = +i*sqrt(|.|)."""
    z = float(z)
    return complex(np.sqrt(z)) if z >= 0 else 1j * np.sqrt(-z)


def check_energy(E, n_y):
    for n in range(n_y + 1):
        if abs(E * E - 2 * n) < BAND_EDGE_TOL:
            raise BandEdgeError(f"E={E!r} is at band edge E^2=2n with n={n}")


@dataclass(frozen=True)
class Mode:
    """One transverse mode ``exp(i xi x) phi(y)`` of the free operator at energy E.

    The profile is ``(top * phi_{n-1}, bottom * phi_n)``.
    """

    index: ModeIndex
    E: float
    xi: complex
    c: float
    top: complex
    bottom: complex
    propagating: bool

    @property
    def n(self):
        return self.index.n

    @property
    def eps(self):
        return self.index.eps

    @property
    def Lambda(self):
        return branch_sqrt(self.E**2 - 2 * self.n)

    @property
    def theta(self):
        return 1j * self.Lambda

    @property
    def Xi(self):
        return self.E + self.eps * self.Lambda

    def channel_vector(self, n_y):
        u = np.zeros(channel_size(n_y), dtype=complex)
        if self.n > 0:
            u[slot(0, self.n - 1)] = self.top
        u[slot(1, self.n)] = self.bottom
        return u

    def profile(self, y):
        phi = hermite_functions(self.n, y)
        top = self.top * phi[self.n - 1] if self.n > 0 else np.zeros_like(phi[0])
        return np.array([top, self.bottom * phi[self.n]])


def make_mode(E, n, eps):
    E = float(E)
    if n == 0:
        if eps != -1:
            raise ValueError("level 0 only carries the mode (0, -1)")
        if abs(E) < BAND_EDGE_TOL:
            raise BandEdgeError("E=0 is at the band edge of level 0")
        return Mode(ModeIndex(0, -1), E, complex(-E), 1.0, 0.0, 1.0, True)
    if abs(E * E - 2 * n) < BAND_EDGE_TOL:
        raise BandEdgeError(f"E={E!r} is at band edge E^2=2n with n={n}")
    lam = branch_sqrt(E * E - 2 * n)
    xi = eps * lam
    c = 1.0 / np.sqrt(2 * n + abs(E - xi) ** 2)
    return Mode(ModeIndex(n, eps), E, xi, c, c * np.sqrt(2 * n), c * (E - xi), E * E > 2 * n)


def mode_labels(n_y):
    """Kept mode labels: all minus modes by level, then plus modes from level 1."""
    return [ModeIndex(n, -1) for n in range(n_y + 1)] + [ModeIndex(n, 1) for n in range(1, n_y + 1)]


def build_modes(E, n_y):
    """All modes with level ``<= n_y`` in the order of :func:`mode_labels`."""
    if n_y < 0:
        raise ValueError("n_y must be non-negative")
    check_energy(E, n_y)
    return tuple(make_mode(E, m.n, m.eps) for m in mode_labels(n_y))


@dataclass(frozen=True)
class DualBasis:
    """Biorthogonal partners of the mode profiles, stored in channel coordinates."""

    E: float
    n_y: int
    P: np.ndarray
    vectors: np.ndarray
    modes: tuple

    def extract(self, psi):
        """Mode coefficients of channel-coordinate field(s) ``psi`` (last axis D)."""
        return np.asarray(psi) @ self.vectors.conj().T


def dual_basis(E, n_y):
    modes = build_modes(E, n_y)
    d = channel_size(n_y)
    u = np.array([m.channel_vector(n_y) for m in modes])
    P = np.zeros(n_y + 1, dtype=complex)
    vec = np.zeros((len(modes), d), dtype=complex)
    vec[0] = u[0]
    for n in range(1, n_y + 1):
        im, ip = n, n_y + n
        p = np.vdot(u[ip], u[im])
        if abs(p) >= 1.0 - DUAL_TOL:
            raise IllConditionedDualBasis(f"|P_{n}| = {abs(p):.12f} at E={E}")
        P[n] = p
        scale = 1.0 / (1.0 - abs(p) ** 2)
        vec[im] = scale * (u[im] - p * u[ip])
        vec[ip] = scale * (u[ip] - np.conj(p) * u[im])
    return DualBasis(float(E), n_y, P, vec, modes)


# ------------------------------------------------------------------ overlaps


@lru_cache(maxsize=64)
def _triple_overlap_cached(n_y, n_k, kind):
    if kind == "uniform":
        t = np.zeros((n_y + 1, n_y + 1, 1))
        t[:, :, 0] = np.eye(n_y + 1)
        return t
    gauss = {"scaled": 2.0, "hermite": 1.5}[kind]
    y, w = gauss_hermite(3 * max(n_y, n_k) + 10, gauss)
    # strip the Gaussians so the quadrature sees only the polynomial parts
    phi = hermite_functions(n_y, y) * np.exp(0.5 * y * y)
    h = y_profiles(kind, n_k, y) * np.exp((gauss - 1.0) * y * y)
    t = np.einsum("q,iq,jq,kq->ijk", w, phi, phi, h)
    t[np.abs(t) < 1e-15] = 0.0
    return t


def triple_overlap(n_y, n_k=None, kind="scaled"):
    """``T[i, j, k] = int phi_i phi_j h_k dy`` for levels ``i, j <= n_y``, ``k <= n_k``."""
    n_k = n_y if n_k is None else n_k
    t = _triple_overlap_cached(int(n_y), int(n_k), kind)
    t.setflags(write=False)
    return t


def overlap_0sk(s, k):
    """Closed form of ``int phi_0 phi_s phi~_k dy``."""
    if k > s or (s - k) % 2:
        return 0.0
    l = (s - k) // 2
    return (-1) ** l * 2.0 ** (k / 2 - s) * np.sqrt(factorial(s) / factorial(k)) / factorial(l)


def pauli_hermite_blocks(n_y, n_k=None, kind="scaled", channels=(0, 1, 2, 3)):
    """Matrices of ``h_k(y) sigma_i`` in channel coordinates.

    Returns an array of shape ``(n_k + 1, len(channels), D, D)``.
    """
    t = triple_overlap(n_y, n_k, kind)
    nk = t.shape[2]
    d = channel_size(n_y)
    out = np.zeros((nk, len(channels), d, d), dtype=complex)
    levels = [np.arange(n_y), np.arange(n_y + 1)]
    for ci, ch in enumerate(channels):
        s = PAULI[ch]
        for sa in range(2):
            for sb in range(2):
                if s[sa, sb] == 0:
                    continue
                la, lb = levels[sa], levels[sb]
                ia = 2 * la + 1 if sa == 0 else 2 * la
                ib = 2 * lb + 1 if sb == 0 else 2 * lb
                block = t[np.ix_(la, lb)]
                out[:, ci][:, ia[:, None], ib[None, :]] = s[sa, sb] * np.moveaxis(block, 2, 0)
    return out
