"""Single-slab Lippmann-Schwinger solve and TR extraction.

The density ``rho`` and the field ``psi`` are sampled at Gauss-Legendre nodes in
``x`` and stored in channel coordinates in ``y`` (see :mod:`spectral_basis`).
The Green's operator is applied by product integration: for each node the
kernel ``exp(theta |x - t|)`` is integrated exactly against the Lagrange
interpolant of the density on either side of the kink at ``t = x``.
"""

from dataclasses import dataclass, field
from functools import cached_property, lru_cache
import math

import numpy as np
import scipy.linalg as sla

from . import spectral_basis as sb
from ._kernels import block_green_product, node_blocks

COND_LIMIT = 1e12


class TrappedModeError(RuntimeError):
    """``I + V G`` is singular or too ill-conditioned to trust."""

    def __init__(self, message, condition):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


# ------------------------------------------------------------------ potentials


@dataclass(frozen=True, eq=False)
class PotentialRep:
    """``V(x, y) = sum_{j,k,i} coeffs[j, k, i] P_j(x) h_k(y) sigma_i`` on ``interval``.

    ``P_j`` is the standard Legendre polynomial mapped to the interval and
    ``h_k`` is chosen by ``y_basis``: Hermite functions ``phi_k`` (``hermite``),
    the rescaled ``sqrt(2) pi**(1/4) phi_k(sqrt(2) y)`` (``scaled``), or the
    constant 1 (``uniform``, a single profile).
    """

    interval: tuple
    coeffs: np.ndarray
    y_basis: str = "hermite"

    def __post_init__(self):
        a, b = (float(v) for v in self.interval)
        if not a < b:
            raise ValueError(f"empty support interval {self.interval}")
        c = np.asarray(self.coeffs)
        if np.iscomplexobj(c):
            if np.abs(c.imag).max(initial=0.0) > 0:
                raise ValueError("potential coefficients must be real")
            c = c.real
        c = np.array(c, dtype=float)
        if c.ndim != 3 or c.shape[2] != 4:
            raise ValueError("coeffs must have shape (n_x+1, n_k+1, 4)")
        if self.y_basis == "uniform" and c.shape[1] != 1:
            raise ValueError("a uniform y profile takes exactly one k index")
        c.setflags(write=False)
        object.__setattr__(self, "interval", (a, b))
        object.__setattr__(self, "coeffs", c)
        sb.y_profiles(self.y_basis, 0, np.zeros(1))

    @classmethod
    def zeros(cls, interval, n_x, n_k, y_basis="hermite"):
        n_k = 0 if y_basis == "uniform" else n_k
        return cls(interval, np.zeros((n_x + 1, n_k + 1, 4)), y_basis)

    @property
    def n_x(self):
        return self.coeffs.shape[0] - 1

    @property
    def n_k(self):
        return self.coeffs.shape[1] - 1

    @property
    def length(self):
        return self.interval[1] - self.interval[0]

    def with_coeffs(self, coeffs):
        return PotentialRep(self.interval, coeffs, self.y_basis)

    def scaled(self, factor):
        return self.with_coeffs(factor * self.coeffs)

    def channel_functions(self, x):
        """``v_{k,i}(x)`` with shape ``(len(x), n_k+1, 4)``; zero outside the support."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        t = sb.to_reference(x, self.interval)
        P = sb.legendre_table(self.n_x, t)
        out = np.einsum("jq,jki->qki", P, self.coeffs)
        out[(t < -1 - 1e-13) | (t > 1 + 1e-13)] = 0.0
        return out

    def evaluate(self, x, y):
        """Pointwise 2x2 matrices with shape ``(len(x), len(y), 2, 2)``."""
        v = self.channel_functions(x)
        h = sb.y_profiles(self.y_basis, self.n_k, np.atleast_1d(y))
        return np.einsum("xki,ky,iab->xyab", v, h, sb.PAULI)


@lru_cache(maxsize=32)
def _blocks(n_y, n_k, kind):
    y = sb.pauli_hermite_blocks(n_y, n_k, kind)
    y = y.reshape(-1, y.shape[2], y.shape[3])
    y.setflags(write=False)
    return y


def potential_blocks(n_y, n_k, kind):
    """Channel-coordinate matrices of ``h_k sigma_i``, flattened over ``(k, i)``."""
    return _blocks(int(n_y), int(n_k), kind)


def project_potential(V, x, n_y):
    """Node-wise ``D x D`` matrices of ``V(x_i, .)`` on the truncated Hermite space."""
    vx = V.channel_functions(x).reshape(len(np.atleast_1d(x)), -1)
    return node_blocks(vx, potential_blocks(n_y, V.n_k, V.y_basis))


# ------------------------------------------------------------------ kernels


def channel_kernel(E, n, direction="out"):
    """Exponent rate and side coefficients of the channel-``n`` Green's kernel.

    The kernel is ``exp(rate |x - t|) * (C_plus if x > t else C_minus)`` acting on
    the slots (upper level n-1, lower level n); channel 0 is 1x1.
    """
    lam = sb.branch_sqrt(E * E - 2 * n)
    theta = 1j * lam
    propagating = E * E > 2 * n
    if direction == "in" and propagating:
        rate, amp = -theta, 1.0 / (2 * theta)
    elif direction in ("out", "in"):
        # evanescent channels are self-adjoint; the incoming kernel keeps decaying
        rate, amp = theta, -1.0 / (2 * theta)
    else:
        raise ValueError(f"direction must be 'out' or 'in', got {direction!r}")
    # D_x of exp(rate|x|) is -i*rate*sign(x)*exp(rate|x|)
    dsign = -1j * rate * amp
    if n == 0:
        cp = np.array([[-dsign + E * amp]])
        cm = np.array([[dsign + E * amp]])
        return rate, cp, cm
    r = np.sqrt(2.0 * n) * amp
    cp = np.array([[dsign + E * amp, r], [r, -dsign + E * amp]])
    cm = np.array([[-dsign + E * amp, r], [r, dsign + E * amp]])
    return rate, cp, cm


def channel_slots(n):
    return [0] if n == 0 else [2 * n - 1, 2 * n]


class ProductRule:
    """Exact integrals of ``exp(rate*|z - t|)`` against the nodal Lagrange basis."""

    def __init__(self, interval, n_nodes, extra_points=(), n_sub=None):
        a, b = interval
        self.interval = (float(a), float(b))
        self.x, self.w = sb.gauss_legendre(n_nodes, a, b)
        self.points = np.concatenate([self.x, np.asarray(extra_points, dtype=float)])
        m = n_sub or n_nodes + 24
        t_ref, w_ref = sb.gauss_legendre(m)
        z = self.points[:, None]
        # left piece [a, z] and right piece [z, b] for every evaluation point
        self._tl = a + (z - a) * 0.5 * (t_ref + 1)
        self._wl = (z - a) * 0.5 * w_ref
        self._tr = z + (b - z) * 0.5 * (t_ref + 1)
        self._wr = (b - z) * 0.5 * w_ref
        self._lag_l = self._lagrange(self._tl)
        self._lag_r = self._lagrange(self._tr)

    def _lagrange(self, t):
        n = len(self.x)
        tr = sb.to_reference(t, self.interval)
        norm = np.sqrt((2 * np.arange(n) + 1) / 2.0)
        Pt = sb.legendre_table(n - 1, tr) * norm[:, None, None]
        Px = sb.legendre_table(n - 1, sb.to_reference(self.x, self.interval)) * norm[:, None]
        half = 0.5 * (self.interval[1] - self.interval[0])
        return np.einsum("lzq,lj->zqj", Pt, Px) * (self.w / half)

    def matrices(self, rate):
        """``(left, right)`` integral matrices with rows at ``self.points``."""
        z = self.points[:, None]
        el = self._wl * np.exp(rate * (z - self._tl))
        er = self._wr * np.exp(rate * (self._tr - z))
        return np.einsum("zq,zqj->zj", el, self._lag_l), np.einsum("zq,zqj->zj", er, self._lag_r)


def default_nodes(E_max, interval, n_x, n_y=0):
    """Node count resolving ``exp(i E x)`` times a degree-``n_x`` polynomial."""
    length = interval[1] - interval[0]
    return int(math.ceil(0.5 * abs(E_max) * length)) + n_x + 18


def greens_matrices(E, interval, n_nodes, n_y):
    """Dense ``(G_out, G_in)`` on the node grid, shape ``(N*D, N*D)``."""
    sb.check_energy(E, n_y)
    rule = ProductRule(interval, n_nodes)
    return tuple(_assemble_green(E, rule, n_y, d, len(rule.x)) for d in ("out", "in"))


def _assemble_green(E, rule, n_y, direction, n_rows):
    d = sb.channel_size(n_y)
    n = len(rule.x)
    G = np.zeros((n_rows, d, n, d), dtype=complex)
    for ch in range(n_y + 1):
        rate, cp, cm = channel_kernel(E, ch, direction)
        left, right = rule.matrices(rate)
        left, right = left[:n_rows], right[:n_rows]
        s = channel_slots(ch)
        for ia, a in enumerate(s):
            for ib, b in enumerate(s):
                G[:, a, :, b] = cp[ia, ib] * left + cm[ia, ib] * right
    return G.reshape(n_rows * d, n * d)


# ------------------------------------------------------------------ slab operator


@dataclass(eq=False)
class SlabOperator:
    """Energy-dependent, potential-independent pieces of a slab solve."""

    E: float
    interval: tuple
    n_y: int
    n_nodes: int
    rule: ProductRule = field(repr=False)
    dual: sb.DualBasis = field(repr=False)
    G: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, E, interval, n_y, n_nodes):
        E = float(E)
        sb.check_energy(E, n_y)
        a, b = float(interval[0]), float(interval[1])
        rule = ProductRule((a, b), n_nodes, extra_points=(a, b))
        dual = sb.dual_basis(E, n_y)
        G = _assemble_green(E, rule, n_y, "out", n_nodes)
        return cls(E, (a, b), n_y, n_nodes, rule, dual, G)

    @property
    def modes(self):
        return self.dual.modes

    @property
    def x(self):
        return self.rule.x

    @property
    def w(self):
        return self.rule.w

    @property
    def dim(self):
        return sb.channel_size(self.n_y)

    @cached_property
    def G_in(self):
        return _assemble_green(self.E, self.rule, self.n_y, "in", self.n_nodes)

    @cached_property
    def free_phases(self):
        length = self.interval[1] - self.interval[0]
        return np.array([np.exp(1j * m.eps * m.xi * length) for m in self.modes])

    @cached_property
    def _channel_arrays(self):
        return (sb.slot_channel(self.n_y), sb.slot_partner(self.n_y))

    def incident_fields(self, z=None):
        """Unit incoming waves of every mode at points ``z``, shape ``(len(z)*D, K)``.

        A plus mode is referenced to ``x_L``, a minus mode to ``x_R``.
        """
        z = self.x if z is None else np.atleast_1d(np.asarray(z, dtype=float))
        a, b = self.interval
        cols = []
        for m in self.modes:
            ref = a if m.eps > 0 else b
            cols.append(np.exp(1j * m.xi * (z - ref))[:, None] * m.channel_vector(self.n_y)[None, :])
        return np.stack(cols, axis=-1).reshape(len(z) * self.dim, len(self.modes))

    @cached_property
    def extraction(self):
        """``B`` with ``alpha_out = free + B @ rho``, shape ``(K, N*D)``.

        Uses Gauss-Legendre quadrature of ``conj(theta_m) . G(x_out, t) rho(t)``.
        """
        a, b = self.interval
        d, n = self.dim, self.n_nodes
        B = np.zeros((len(self.modes), n, d), dtype=complex)
        for im, m in enumerate(self.modes):
            rate, cp, cm = channel_kernel(self.E, m.n, "out")
            s = channel_slots(m.n)
            if m.eps > 0:
                k, dist = cp, b - self.x
            else:
                k, dist = cm, self.x - a
            row = self.dual.vectors[im, s].conj() @ k
            B[im][:, s] = (self.w * np.exp(rate * dist))[:, None] * row[None, :]
        return B.reshape(len(self.modes), n * d)

    def field_operator(self, z):
        """Matrix mapping nodal density to the scattered field at arbitrary points."""
        rule = ProductRule(self.interval, self.n_nodes, extra_points=np.atleast_1d(z))
        full = _assemble_green(self.E, rule, self.n_y, "out", len(rule.points))
        return full[self.n_nodes * self.dim :]

    def solve(self, V_nodes, incoming=None):
        return SlabSolution.solve(self, V_nodes, incoming)


def build_slab(E, interval, n_y, n_nodes=None, n_x=8):
    n_nodes = n_nodes or default_nodes(E, interval, n_x, n_y)
    return SlabOperator.build(E, interval, n_y, n_nodes)


def _block_apply(V_nodes, X):
    n, d, _ = V_nodes.shape
    return np.einsum("iab,ibp->iap", V_nodes, X.reshape(n, d, -1)).reshape(n * d, -1)


@dataclass(eq=False)
class SlabSolution:
    """Densities and fields of one potential on one slab; ``alpha_out`` holds the TR matrix."""

    slab: SlabOperator
    V_nodes: np.ndarray
    lu: tuple
    condition: float
    incoming: np.ndarray
    psi_in: np.ndarray
    rho: np.ndarray
    psi: np.ndarray
    alpha_out: np.ndarray

    @classmethod
    def solve(cls, slab, V_nodes, incoming=None):
        """Solve ``(I + V G) rho = -V psi_in``.

        ``incoming`` is a ``(K, P)`` array of incoming coefficients
        ``(alpha_+(x_L), alpha_-(x_R))`` in mode order; the identity (all unit
        incoming waves) by default.
        """
        nd = slab.n_nodes * slab.dim
        channel, partner = slab._channel_arrays
        A = block_green_product(V_nodes, slab.G, channel, partner)
        A[np.diag_indices(nd)] += 1.0
        anorm = np.abs(A).sum(axis=0).max()
        lu = sla.lu_factor(A, check_finite=False)
        (gecon,) = sla.get_lapack_funcs(("gecon",), (lu[0],))
        rcond, _ = gecon(lu[0], anorm, norm="1")
        cond = np.inf if rcond == 0 else 1.0 / rcond
        if cond > COND_LIMIT:
            raise TrappedModeError("trapped mode or resolution failure in I + V G", cond)
        K = len(slab.modes)
        incoming = np.eye(K, dtype=complex) if incoming is None else np.asarray(incoming, dtype=complex)
        psi_in = slab.incident_fields() @ incoming
        rho = sla.lu_solve(lu, -_block_apply(V_nodes, psi_in), check_finite=False)
        psi = psi_in + slab.G @ rho
        alpha = slab.free_phases[:, None] * incoming + slab.extraction @ rho
        return cls(slab, V_nodes, lu, cond, incoming, psi_in, rho, psi, alpha)

    def residual(self):
        """Relative Lippmann-Schwinger residual ``|rho + V psi| / |V psi_in|``."""
        r = self.rho + _block_apply(self.V_nodes, self.psi)
        scale = np.linalg.norm(_block_apply(self.V_nodes, self.psi_in))
        return float(np.linalg.norm(r) / scale) if scale > 0 else float(np.linalg.norm(r))

    def field_at(self, z):
        """Total field at points ``z`` for every incoming column, shape ``(len(z), D, P)``."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        psi = self.slab.incident_fields(z) @ self.incoming + self.slab.field_operator(z) @ self.rho
        return psi.reshape(len(z), self.slab.dim, -1)

    def adjoint_solve(self, g_in):
        """Solve ``(I + W^-1 G^H W V) g = g_in`` reusing the forward factorization."""
        w = np.repeat(self.slab.w, self.slab.dim)[:, None]
        lam = sla.lu_solve(self.lu, w * g_in, trans=2, check_finite=False)
        return lam / w


def solve_density(slab, V_nodes, incoming=None):
    """Density and interior field for the given incoming coefficients."""
    sol = SlabSolution.solve(slab, V_nodes, incoming)
    return sol.rho, sol.psi


def slab_tr(slab, V_nodes):
    """TR matrix of one slab; see :class:`diracwall.tr_merge.TRMatrix` for the layout."""
    from .tr_merge import TRMatrix

    sol = SlabSolution.solve(slab, V_nodes)
    return TRMatrix(slab.E, slab.interval, slab.n_y, sol.alpha_out)
