"""Born-level scattering data and its explicit inversion at fixed frequency.

Conventions. ``born_forward`` returns first-order coefficients of the
origin-referenced, flux-normalized S matrix produced by
:func:`diracwall.tr_merge.extract_smatrix`::

    S_lin[m, p](E) = -i E / sqrt(|xi_m| |xi_p|) * sum_{k,i} vhat_{k,i}(xi_m - xi_p) O_{k,i}(m, p)

with ``vhat(xi) = int v(x) exp(-i xi x) dx`` and ``O`` the transverse overlap of
``conj(phi_m) . sigma_i phi_p`` against the potential's y-profile ``h_k``.
:func:`textbook_coefficient` converts to the ``i E / Lambda_q`` normalization
used by the reduced-data formulas.
"""

from dataclasses import dataclass, field
from itertools import product
from math import factorial
import json

import numpy as np
from scipy.special import spherical_jn

from . import spectral_basis as sb
from .greens_slab import potential_blocks

C1 = 2.0 - np.sqrt(np.e)
C2 = np.sqrt(np.e)
FREQ_TOL = 1e-9


class ExcludedFrequencyError(ValueError):
    """Frequency in the excluded set {0, +-sqrt(2|n-q|)} or at a branch point."""


class MissingSampleError(KeyError):
    def __init__(self, missing):
        super().__init__(f"missing samples (m, p, E): {missing}")
        self.missing = missing


# ------------------------------------------------------------------ Fourier data


def legendre_fourier(j_max, xi, interval):
    """``int_a^b P_j(t(x)) exp(-i xi x) dx`` for ``j <= j_max``, shape ``(j_max+1, len(xi))``."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    a, b = interval
    h, c = 0.5 * (b - a), 0.5 * (a + b)
    j = np.arange(j_max + 1)[:, None]
    return 2 * h * (-1j) ** j * spherical_jn(j, xi[None, :] * h) * np.exp(-1j * xi * c)[None, :]


def potential_fourier(V, xi):
    """``vhat_{k,i}(xi)`` with shape ``(len(xi), n_k+1, 4)``."""
    F = legendre_fourier(V.n_x, xi, V.interval)
    return np.einsum("jq,jki->qki", F, V.coeffs)


# ------------------------------------------------------------------ dispersion


def xi_of(n, eps, E):
    return sb.make_mode(E, n, eps).xi


def xi_pair(m, p, E):
    """``xi_m(E) - xi_p(E)``."""
    return xi_of(m.n, m.eps, E) - xi_of(p.n, p.eps, E)


def pair_energy(n, q, xi):
    """Positive root of ``E**2 = xi**2/4 + n + q + (n - q)**2 / xi**2``."""
    return float(np.sqrt(xi * xi / 4 + n + q + (n - q) ** 2 / (xi * xi)))


@dataclass(frozen=True)
class DispersionPair:
    n: int
    q: int
    xi: float
    eps_m: int
    eps_p: int
    E: float

    @property
    def m(self):
        return sb.ModeIndex(self.n, self.eps_m)

    @property
    def p(self):
        return sb.ModeIndex(self.q, self.eps_p)


def _directions(level):
    return (-1,) if level == 0 else (1, -1)


def resolve_dispersion(n, q, xi, root=None):
    """Directions and energy with ``xi_m(E) - xi_p(E) = xi``.

    ``root`` selects the sign of E; by default the positive root is used when
    it admits a solution and the negative root otherwise (needed when one
    level is 0 and the frequency has the wrong sign for ``(0, -1)``).
    """
    xi = float(xi)
    if abs(xi) < FREQ_TOL:
        raise ExcludedFrequencyError("xi = 0 is excluded")
    edge = np.sqrt(2 * abs(n - q))
    if abs(abs(xi) - edge) < FREQ_TOL:
        raise ExcludedFrequencyError(f"|xi| = sqrt(2|n-q|) = {edge} is excluded for (n, q) = ({n}, {q})")
    mag = pair_energy(n, q, xi)
    for sign in (1, -1) if root is None else (root,):
        E = sign * mag
        if min(abs(E * E - 2 * n), abs(E * E - 2 * q)) < FREQ_TOL:
            continue
        for em, ep in product(_directions(n), _directions(q)):
            mm, pp = sb.make_mode(E, n, em), sb.make_mode(E, q, ep)
            if not (mm.propagating and pp.propagating):
                continue
            if abs((mm.xi - pp.xi) - xi) <= 1e-10 * max(1.0, abs(xi)):
                return DispersionPair(n, q, xi, em, ep, E)
    raise ExcludedFrequencyError(f"no propagating pair at levels ({n}, {q}) reaches xi = {xi}")


# ------------------------------------------------------------------ Born data


def _key(m, p, E):
    return (int(m[0]), int(m[1]), int(p[0]), int(p[1]), round(float(E), 12))


@dataclass
class LinearizedDataSet:
    """Born coefficients keyed by ``(n, eps_m, q, eps_p, E)``."""

    samples: dict = field(default_factory=dict)

    def add(self, m, p, E, value):
        self.samples[_key(m, p, E)] = complex(value)

    def get(self, m, p, E):
        try:
            return self.samples[_key(m, p, E)]
        except KeyError:
            raise MissingSampleError([(tuple(m), tuple(p), float(E))]) from None

    def require(self, plan):
        missing = [(tuple(m), tuple(p), float(E)) for m, p, E in plan if _key(m, p, E) not in self.samples]
        if missing:
            raise MissingSampleError(missing)

    def __len__(self):
        return len(self.samples)

    def to_json(self):
        return json.dumps([[list(k), [v.real, v.imag]] for k, v in self.samples.items()])

    @classmethod
    def from_json(cls, text):
        out = cls()
        for k, (re, im) in json.loads(text):
            out.samples[tuple(k[:4]) + (k[4],)] = complex(re, im)
        return out


def overlap_vector(m, p, E, n_k, kind):
    """``O_{k,i}(m, p)`` for all ``k <= n_k`` and Pauli channels, shape ``(n_k+1, 4)``."""
    mm, pp = sb.make_mode(E, m.n, m.eps), sb.make_mode(E, p.n, p.eps)
    n_lev = max(m.n, p.n)
    um, up = mm.channel_vector(n_lev), pp.channel_vector(n_lev)
    Y = potential_blocks(n_lev, n_k, kind)
    return np.einsum("a,kab,b->k", um.conj(), Y, up).reshape(-1, 4)


def born_coefficient(vhat, m, p, E, n_k, kind):
    """First-order S coefficient given a callable ``vhat(xi) -> (n_k+1, 4)``."""
    mm, pp = sb.make_mode(E, m.n, m.eps), sb.make_mode(E, p.n, p.eps)
    if not (mm.propagating and pp.propagating):
        raise ValueError(f"Born data needs propagating modes, got {m}, {p} at E={E}")
    xi = (mm.xi - pp.xi).real
    O = overlap_vector(m, p, E, n_k, kind)
    return -1j * E / np.sqrt(abs(mm.xi) * abs(pp.xi)) * np.sum(vhat(xi) * O)


def born_forward(V, samples):
    """Born data of ``V`` at each ``(m, p, E)``."""
    out = LinearizedDataSet()
    for m, p, E in samples:
        m, p = sb.ModeIndex(*m), sb.ModeIndex(*p)
        sb.check_energy(E, max(m.n, p.n))
        value = born_coefficient(lambda xi: potential_fourier(V, [xi])[0], m, p, E, V.n_k, V.y_basis)
        out.add(m, p, E, value)
    return out


def textbook_coefficient(value, m, p, E):
    """Convert to the ``i E / Lambda_q`` normalization (no flux symmetrization)."""
    m, p = sb.ModeIndex(*m), sb.ModeIndex(*p)
    lm = abs(xi_of(m.n, m.eps, E))
    lq = abs(xi_of(p.n, p.eps, E))
    return -np.sqrt(lm / lq) * value


# ------------------------------------------------------------------ scalar inversion


def _check_scalar_xi(xi, n):
    if xi <= 0:
        raise ExcludedFrequencyError("the scalar reduction uses xi > 0")
    for s in range(1, n + 1):
        if abs(xi * xi / 2 - s) < FREQ_TOL:
            raise ExcludedFrequencyError(f"xi**2/2 = {s} is a branch point of the reduction")


def scalar_energy(s, xi):
    return float(np.sqrt(xi * xi / 4 + 2)) if s == 0 else xi / 2 + s / xi


def scalar_sample_plan(xi, n):
    """``(m, p, E)`` triples feeding the reduced vector of length ``max(n, 2) + 1``."""
    _check_scalar_xi(xi, max(n, 2))
    plan = [(sb.ModeIndex(1, 1), sb.ModeIndex(1, -1), scalar_energy(0, xi))]
    for s in range(1, max(n, 2) + 1):
        eps = 1 if s < xi * xi / 2 else -1
        plan.append((sb.ModeIndex(s, eps), sb.ModeIndex(0, -1), scalar_energy(s, xi)))
    return plan


def reduce_scalar(data, xi, n):
    """Reduced vector ``S~`` with ``S~_s = sum_k <phi>_(0,s;k) vhat_k`` for ``s >= 1``.

    The textbook reduction carries a factor ``-i`` in front of ``S~``; it is
    absorbed here, so row 0 reads ``S~_0 = sum_k (<phi>_(0,0;k) + <phi>_(1,1;k)) vhat_k``.
    """
    plan = scalar_sample_plan(xi, n)
    data.require(plan)
    out = np.zeros(len(plan), dtype=complex)
    for s, (m, p, E) in enumerate(plan):
        book = textbook_coefficient(data.get(m, p, E), m, p, E)
        pref = np.sqrt(2) / 2 * xi if s == 0 else np.sqrt(1 + xi * xi / (2 * s))
        out[s] = -1j * pref * book
    return out


def scalar_matrix(n):
    """Rows of the reduced scalar system; row 0 is the (1+, 1-) combination."""
    size = max(n, 2) + 1
    t = sb.triple_overlap(size, size, "scaled")
    A = np.array([t[0, s, :size] for s in range(size)])
    A[0] = t[0, 0, :size] + t[1, 1, :size]
    return A


def invert_scalar(xi, S):
    """Recover ``vhat_0..vhat_n`` from the reduced vector ``S~`` (length ``n + 1``)."""
    S = np.asarray(S, dtype=complex)
    n = len(S) - 1
    if n < 0:
        raise ValueError("empty reduced vector")
    _check_scalar_xi(xi, n)
    A = scalar_matrix(n)
    v = np.zeros(n + 1, dtype=complex)
    v[0] = S[0] / 2 - np.sqrt(2) * S[2] / 2 if n >= 2 else S[0] / A[0, 0]
    for s in range(1, n + 1):
        v[s] = (S[s] - A[s, :s] @ v[:s]) / A[s, s]
    return v


# ------------------------------------------------------------------ non-scalar inversion


def textbook_data(data, m, p, E):
    """``i Lambda_q S_lin`` in the textbook normalization, from a stored Born sample."""
    m, p = sb.ModeIndex(*m), sb.ModeIndex(*p)
    return -1j * np.sqrt(abs(xi_of(m.n, m.eps, E)) * abs(xi_of(p.n, p.eps, E))) * data.get(m, p, E)


def full_sample_plan(xi, n):
    """Propagating samples with level pairs ``{s, 0}`` or ``{s, 1}``, ``s <= n + 1``.

    Energies are ``+-E_{n,q}(xi)`` and every sample has frequency
    ``xi_m - xi_p = +-xi``; the sign is returned as the fourth entry.
    """
    _check_scalar_xi(xi, 0)
    plan = set()
    for s in range(n + 2):
        for base in (0, 1):
            for a, b in {(s, base), (base, s)}:
                mag = pair_energy(a, b, xi)
                for E in (mag, -mag):
                    if min(abs(E * E - 2 * a), abs(E * E - 2 * b)) < FREQ_TOL:
                        continue
                    for em, ep in product(_directions(a), _directions(b)):
                        mm, pp = sb.make_mode(E, a, em), sb.make_mode(E, b, ep)
                        if not (mm.propagating and pp.propagating):
                            continue
                        f = (mm.xi - pp.xi).real
                        for sign in (1, -1):
                            if abs(f - sign * xi) <= 1e-10 * max(1.0, xi):
                                plan.add((mm.index, pp.index, round(E, 12), sign))
    return sorted(plan, key=lambda t: (t[0].n, t[1].n, t[0].eps, t[1].eps, t[2]))


def full_matrix(plan, n, kind="scaled"):
    """Real system mapping ``(Re vhat, Im vhat)`` of shape ``(n+1, 4)`` to ``(Re d, Im d)``.

    A sample at frequency ``-xi`` sees ``conj(vhat(xi))`` because the potential is real.
    """
    rows = []
    for m, p, E, sign in plan:
        mm, pp = sb.make_mode(E, m.n, m.eps), sb.make_mode(E, p.n, p.eps)
        R = -1j * E / np.sqrt(abs(mm.xi) * abs(pp.xi)) * overlap_vector(m, p, E, n, kind).ravel()
        rows.append(np.concatenate([R.real, -sign * R.imag]))
        rows.append(np.concatenate([R.imag, sign * R.real]))
    return np.array(rows)


def full_null_space(xi, n, rank_tol=1e-10):
    """Real null vectors of :func:`full_matrix` as complex ``(count, n+1, 4)`` arrays.

    They are the linearized gauge directions ``sigma_3 d_x chi - sigma_2 d_y chi``
    and live in the ``sigma_2`` and ``sigma_3`` channels only.
    """
    A = full_matrix(full_sample_plan(xi, n), n)
    _, sv, vt = np.linalg.svd(A)
    null = vt[np.sum(sv > rank_tol * sv[0]) :]
    half = A.shape[1] // 2
    return (null[:, :half] + 1j * null[:, half:]).reshape(-1, n + 1, 4)


def invert_full(xi, data, n, rank_tol=1e-10):
    """Minimum-norm ``vhat_{k,i}(xi)``, ``k <= n``, all four Pauli channels, shape ``(n+1, 4)``.

    Solves the Born relations of :func:`full_sample_plan` in the least-squares
    sense. The ``sigma_0`` and ``sigma_1`` channels are determined uniquely;
    in ``sigma_2``/``sigma_3`` the answer is unique only up to
    :func:`full_null_space`, and the component along it is set to zero.
    """
    plan = full_sample_plan(xi, n)
    data.require([t[:3] for t in plan])
    A = full_matrix(plan, n)
    d = np.array([data.get(m, p, E) for m, p, E, _ in plan])
    b = np.column_stack([d.real, d.imag]).ravel()
    null = full_null_space(xi, n, rank_tol)
    if np.abs(null[:, :, :2]).max(initial=0.0) > 1e-8:
        raise np.linalg.LinAlgError(f"sigma_0/sigma_1 channels are not determined at xi={xi}")
    x, *_ = np.linalg.lstsq(A, b, rcond=rank_tol)
    half = len(x) // 2
    return (x[:half] + 1j * x[half:]).reshape(n + 1, 4)


def _xi_big(n, eps, E):
    return E + eps * np.sqrt(E * E - 2 * n)


def sigma1_sample_plan(xi, s):
    """Samples ``(s_one, E), (one_s, -E), (one_s, E), (s_one, -E)`` at ``E = E_{s,1}(xi)``."""
    E = pair_energy(s, 1, xi)
    below = xi < np.sqrt(2 * (s - 1))
    s_one = (sb.ModeIndex(s, -1 if below else 1), sb.ModeIndex(1, -1))
    one_s = (sb.ModeIndex(1, 1), sb.ModeIndex(s, 1 if below else -1))
    return [(*s_one, E), (*one_s, -E), (*one_s, E), (*s_one, -E)]


def sigma1_assembly(data, xi, s):
    """``(S2_s, S3_s)`` with ``sum_k <phi>_(s-1,1;k) vhat_{k,1} = S2_s`` and ``sum_k <phi>_(0,s;k) vhat_{k,1} = S3_s``."""
    if s < 2:
        raise ValueError("the sigma_1 assembly needs s >= 2")
    plan = sigma1_sample_plan(xi, s)
    data.require(plan)
    d = [textbook_data(data, m, p, E) for m, p, E in plan]
    E = plan[0][2]
    es = plan[0][0].eps
    l1, ls = np.sqrt(E * E - 2), np.sqrt(E * E - 2 * s)
    A, B = d[0] + d[1], d[2] + d[3]
    a = np.sqrt(_xi_big(s, es, E) * _xi_big(1, 1, E))
    b = np.sqrt(_xi_big(s, -es, E) * _xi_big(1, -1, E))
    den = 2 * E * (l1 - ls if es < 0 else l1 + ls)
    return (-a * A + b * B) / den, (b * A - a * B) / den


def sigma1_low_modes(data, xi):
    """Closed forms for ``vhat_{0,1}`` and ``vhat_{1,1}`` from the ``s = 2, 3`` assemblies."""
    S22, S32 = sigma1_assembly(data, xi, 2)
    S23, S33 = sigma1_assembly(data, xi, 3)
    return S22 - np.sqrt(2) * S32, S23 - np.sqrt(3) * S33


# ------------------------------------------------------------------ local inversion


def born_matrix(potentials, samples):
    """Born data of each potential (columns) at each ``(m, p, E)`` sample (rows)."""
    cols = []
    for V in potentials:
        d = born_forward(V, samples)
        cols.append([d.get(m, p, E) for m, p, E in samples])
    return np.array(cols).T


def smatrix_samples(V, samples, n_y=None, n_nodes=None):
    """Nonlinear flux-normalized S entries at ``(m, p, E)`` samples."""
    from .greens_slab import build_slab, project_potential
    from .tr_merge import TRMatrix, extract_smatrix

    out = []
    cache = {}
    for m, p, E in samples:
        key = round(float(E), 12)
        if key not in cache:
            ny = n_y or max(max(a.n, b.n) for a, b, e in samples if round(float(e), 12) == key) + 2
            slab = build_slab(E, V.interval, ny, n_nodes, n_x=V.n_x)
            sol = slab.solve(project_potential(V, slab.x, ny))
            S, labels = extract_smatrix(TRMatrix(E, V.interval, ny, sol.alpha_out))
            cache[key] = (S, {lab: i for i, lab in enumerate(labels)})
        S, idx = cache[key]
        out.append(S[idx[sb.ModeIndex(*m)], idx[sb.ModeIndex(*p)]])
    return np.array(out)


def local_inversion(forward, jacobian, data, x0, iters=100, tol=1e-13):
    """Fixed point ``x <- x - J^+ (F(x) - data)`` with a constant Jacobian ``J``.

    ``forward`` maps real parameters to complex data; the real and imaginary
    parts are stacked so the correction is real. Returns ``(x, residuals)``.
    """
    J = np.vstack([jacobian.real, jacobian.imag])
    pinv = np.linalg.pinv(J)
    x = np.array(x0, dtype=float)
    residuals = []
    for _ in range(iters):
        r = forward(x) - data
        residuals.append(float(np.linalg.norm(r)))
        step = pinv @ np.concatenate([r.real, r.imag])
        x = x - step
        if np.linalg.norm(step) <= tol * max(1.0, np.linalg.norm(x)):
            break
    return x, residuals


# ------------------------------------------------------------------ norms and bounds


def _weights(n, base):
    s = np.arange(n + 1)
    return base ** (s / 2) / np.sqrt([factorial(k) for k in s])


def norm_V(a, start=0):
    a = np.asarray(a)
    return float(np.sum(np.abs(a[start:]) * _weights(len(a) - 1, 1.0)[start:]))


def norm_S(a, start=0):
    a = np.asarray(a)
    return float(np.sum(np.abs(a[start:]) * _weights(len(a) - 1, 2.0)[start:]))


@dataclass(frozen=True)
class BoundReport:
    lower: float
    middle: float
    upper: float

    @property
    def lower_slack(self):
        return self.middle - self.lower

    @property
    def upper_slack(self):
        return self.upper - self.middle

    @property
    def holds(self):
        tol = 1e-12 * max(1.0, self.middle)
        return self.lower_slack >= -tol and self.upper_slack >= -tol


def norm_bounds_check(v, S, start=0):
    """``C1 |v|_V <= |S|_S <= C2 |v|_V`` with sums from ``start`` to ``n``."""
    return BoundReport(C1 * norm_V(v, start), norm_S(S, start), C2 * norm_V(v, start))


def lemma_bound(beta, alpha):
    """Column-dominance constants ``B_s`` for ``T = beta @ v`` with weights ``alpha``."""
    beta = np.asarray(beta)
    alpha = np.asarray(alpha, dtype=float)
    diag = np.diag(beta)
    if np.any(diag == 0):
        raise ValueError("the system needs a nonzero diagonal")
    ratio = np.abs(alpha[:, None] * beta / (alpha[None, :] * diag[:, None]))
    np.fill_diagonal(ratio, 0.0)
    return ratio.sum(axis=0)


def lemma_bounds(beta, alpha, v):
    """Both sides of the weighted sandwich; ``None`` when some ``B_s >= 1``."""
    B = lemma_bound(beta, alpha)
    if np.any(B >= 1):
        return None
    T = np.asarray(beta) @ np.asarray(v)
    alpha = np.asarray(alpha, dtype=float)
    av = alpha * np.abs(v)
    middle = float(np.sum(np.abs(alpha / np.diag(beta) * T)))
    return BoundReport(float(np.sum((1 - B) * av)), middle, float(np.sum((1 + B) * av)))


# ------------------------------------------------------------------ energy-grid stability


def discrete_stability_integral(vhat, n, E_max, points=2001):
    """Trapezoidal evaluation of the energy-integrated stability estimate.

    ``vhat(xi)`` returns the scalar Hermite coefficients ``vhat_0..vhat_n``
    of a scaled-Hermite potential. Returns ``(left, middle)`` where ``left``
    integrates ``sum_s |vhat_s(xi)| / sqrt(s!)`` over ``xi`` and ``middle`` integrates
    the Born data in energy with the Jacobians of the change of variables.
    Both ranges are truncated at ``E_max``. The energy integrals run over
    ``u = Lambda_s(E)``, which removes the ``1 / Lambda_s`` edge singularity.
    """

    def data(m, p, E):
        return born_coefficient(lambda z: _pad(vhat(z)), m, p, E, n, "scaled")

    def _pad(v):
        out = np.zeros((n + 1, 4), dtype=complex)
        out[:, 0] = v
        return out

    def book(m, p, E):
        return abs(textbook_coefficient(data(m, p, E), m, p, E))

    xi_max = 2 * np.sqrt(max(E_max**2 - 2, 0.0))
    xs = np.linspace(1e-6, xi_max, points)
    w = 1.0 / np.sqrt([factorial(s) for s in range(n + 1)])
    left = np.trapezoid([np.sum(np.abs(vhat(z)) * w) for z in xs], xs)

    middle = 0.0
    for s in range(n + 1):
        level = max(s, 1)
        u_max = np.sqrt(max(E_max**2 - 2 * level, 0.0))
        if u_max <= 0:
            continue
        us = np.linspace(1e-4, u_max, points)
        vals = []
        for u in us:
            E = np.sqrt(2 * level + u * u)
            if s == 0:
                # E |S_{1+,1-}| dE with dE = u / E du
                vals.append(u * book(sb.ModeIndex(1, 1), sb.ModeIndex(1, -1), E))
                continue
            acc = 0.0
            for eps in (1, -1):
                m = sb.ModeIndex(s, eps)
                Xi_m, Xi_o = E + eps * u, E - eps * u
                acc += Xi_m * book(m, sb.ModeIndex(0, -1), E) / np.sqrt(Xi_o)
            # sqrt(E) / Lambda_s dE = du / sqrt(E)
            vals.append(2 ** (s / 2) / np.sqrt(factorial(s)) * acc / np.sqrt(E))
        middle += np.trapezoid(vals, us)
    return float(left), float(middle)
