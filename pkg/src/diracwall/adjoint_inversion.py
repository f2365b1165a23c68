"""Adjoint-state gradient of the TR misfit and plain gradient descent.

For every energy the forward solve gives the interior fields ``psi^p`` and the
outgoing coefficients ``alpha^p``. The weighted residual ``r = w (alpha - T_ob)``
drives an incoming adjoint wave ``g_in``; the adjoint field ``g`` solves

    g + G_in V g = g_in,      i.e.  (H - E + V) g = f,

which is the self-adjoint reading of the adjoint problem for Hermitian ``V``.
On the discrete level ``g = W^-1 (I + V G)^-H B^H r`` with ``W`` the quadrature
weights and ``B`` the extraction matrix, so the gradient

    dPi / dkappa_A = -2 Re sum_p <g^p, V_A psi^p>

is the exact derivative of the discretized objective.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import csv
import json
import time

import numpy as np

from . import spectral_basis as sb
from ._kernels import node_blocks, pair_outer, trace_pairing
from .greens_slab import PotentialRep, SlabOperator, TrappedModeError, channel_kernel, default_nodes, potential_blocks
from .parallel import worker_count

PRESETS = ("M0", "MA", "MB", "MT", "MR")


class MissingEntryError(KeyError):
    def __init__(self, m, p, E):
        super().__init__(f"observed entry (m={tuple(m)}, p={tuple(p)}, E={E}) is missing")
        self.entry = (tuple(m), tuple(p), E)


class IterationError(RuntimeError):
    def __init__(self, iteration, cause):
        super().__init__(f"forward solve failed at iterate {iteration}: {cause}")
        self.iteration = iteration


# ------------------------------------------------------------------ observations


def observation_mask(preset, E, n_y):
    """Boolean ``K x K`` selection of TR entries ``(m, p)`` for a named preset.

    ``M0`` keeps every entry; ``MA`` keeps level pairs ``{0, s}`` or ``{1, s}``;
    ``MB`` keeps equal levels; ``MT`` keeps propagating transmissions ``m = p``;
    ``MR`` keeps propagating reflections ``n = q >= 1`` with opposite directions.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown observation preset {preset!r}; expected one of {PRESETS}")
    modes = sb.build_modes(E, n_y)
    n = np.array([m.n for m in modes])
    eps = np.array([m.eps for m in modes])
    prop = np.array([m.propagating for m in modes])
    N, Q = n[:, None], n[None, :]
    both = prop[:, None] & prop[None, :]
    if preset == "M0":
        return np.ones((len(modes), len(modes)), dtype=bool)
    if preset == "MA":
        return (N <= 1) | (Q <= 1)
    if preset == "MB":
        return N == Q
    if preset == "MT":
        return np.eye(len(modes), dtype=bool) & both
    return (N == Q) & (N >= 1) & (eps[:, None] != eps[None, :]) & both


@dataclass
class ObservationSet:
    """Observed TR entries ``T_ob[s]`` with masks and weights per energy ``E_s``."""

    energies: tuple
    n_y: int
    masks: np.ndarray
    data: np.ndarray
    weights: np.ndarray
    preset: str = None

    def __post_init__(self):
        self.energies = tuple(float(E) for E in self.energies)
        k = sb.channel_size(self.n_y)
        shape = (len(self.energies), k, k)
        self.masks = np.broadcast_to(np.asarray(self.masks, dtype=bool), shape).copy()
        self.data = np.broadcast_to(np.asarray(self.data, dtype=complex), shape).copy()
        self.weights = np.broadcast_to(np.asarray(self.weights, dtype=float), shape).copy()
        if np.any(self.weights[self.masks] <= 0):
            raise ValueError("observation weights must be positive")

    @classmethod
    def from_preset(cls, preset, energies, n_y, data, weights=1.0):
        masks = np.array([observation_mask(preset, E, n_y) for E in energies])
        return cls(tuple(energies), n_y, masks, data, weights, preset)

    def with_data(self, data):
        return ObservationSet(self.energies, self.n_y, self.masks, data, self.weights, self.preset)

    def pairs(self, s):
        labels = sb.mode_labels(self.n_y)
        return [(labels[i], labels[j]) for i, j in zip(*np.nonzero(self.masks[s]))]

    def residual(self, s, T):
        """Weighted residual ``w (T - T_ob)`` on observed entries, zero elsewhere."""
        T = np.asarray(getattr(T, "matrix", T))
        if T.shape != self.data[s].shape:
            raise ValueError(f"TR sample at E={self.energies[s]} has shape {T.shape}")
        bad = self.masks[s] & ~np.isfinite(T)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            labels = sb.mode_labels(self.n_y)
            raise MissingEntryError(labels[i], labels[j], self.energies[s])
        return np.where(self.masks[s], self.weights[s] * (T - self.data[s]), 0.0)


def misfit(T, obs):
    """``Pi^T = sum_s sum_(m,p) w |T - T_ob|^2`` over the observed entries."""
    if len(T) != len(obs.energies):
        raise ValueError(f"expected {len(obs.energies)} TR samples, got {len(T)}")
    total = 0.0
    for s, Ts in enumerate(T):
        r = obs.residual(s, Ts)
        d = np.where(obs.masks[s], np.asarray(getattr(Ts, "matrix", Ts)) - obs.data[s], 0.0)
        total += float(np.sum((r * d.conj()).real))
    return total


# ------------------------------------------------------------------ adjoint source


def adjoint_bracket(E, mode, P):
    """Coefficient of ``g_in`` on the residual's own mode per unit weighted residual."""
    theta = 1j * sb.branch_sqrt(E * E - 2 * mode.n)
    if mode.n == 0:
        return E / theta
    partner = sb.make_mode(E, mode.n, -mode.eps)
    if mode.eps < 0:
        num = E / theta - P * partner.c / mode.c * (E / theta + 1j)
    else:
        num = E / theta - np.conj(P) * partner.c / mode.c * (E / theta - 1j)
    return num / (1.0 - abs(P) ** 2)


@dataclass(eq=False)
class AdjointIncoming:
    """Incoming adjoint wave ``g_in`` of every column ``p``.

    Residual row ``m`` contributes ``diag[m, p] exp(i xi_m (x - x_m)) phi_m``
    and, for an evanescent ``m``, ``cross[m, p] exp(i xi_mbar (x - x_m)) phi_mbar``
    on the opposite-direction mode ``mbar``; ``x_m`` is the boundary where
    ``m`` leaves the slab.
    """

    slab: SlabOperator
    diag: np.ndarray
    cross: np.ndarray

    def field(self, z=None):
        """``g_in`` at points ``z`` (default: the nodes), shape ``(len(z) * D, P)``."""
        slab = self.slab
        z = slab.x if z is None else np.atleast_1d(np.asarray(z, dtype=float))
        a, b = slab.interval
        modes = slab.modes
        index = {m.index: i for i, m in enumerate(modes)}
        out = np.zeros((len(z), slab.dim, self.diag.shape[1]), dtype=complex)
        for i, m in enumerate(modes):
            ref = b if m.eps > 0 else a
            out += _wave(m, z, ref, slab.n_y)[:, :, None] * self.diag[i]
            if not m.propagating:
                mbar = modes[index[sb.ModeIndex(m.n, -m.eps)]]
                out += _wave(mbar, z, ref, slab.n_y)[:, :, None] * self.cross[i]
        return out.reshape(len(z) * slab.dim, -1)


def _wave(mode, z, ref, n_y):
    return np.exp(1j * mode.xi * (z - ref))[:, None] * mode.channel_vector(n_y)[None, :]


def adjoint_incoming(residual, slab):
    """Mode coefficients of ``g_in`` from a ``K x P`` weighted residual ``w (alpha - T_ob)``."""
    residual = np.asarray(residual, dtype=complex)
    E, dual = slab.E, slab.dual
    index = {m.index: i for i, m in enumerate(slab.modes)}
    diag = np.zeros_like(residual)
    cross = np.zeros_like(residual)
    for i, m in enumerate(slab.modes):
        if not residual[i].any():
            continue
        diag[i] = adjoint_bracket(E, m, dual.P[m.n]) * residual[i]
        if not m.propagating:
            _, cp, cm = channel_kernel(E, m.n, "out")
            kern = cp if m.eps > 0 else cm
            s = [0] if m.n == 0 else [2 * m.n - 1, 2 * m.n]
            j = index[sb.ModeIndex(m.n, -m.eps)]
            coef = np.vdot(dual.vectors[j, s], kern.conj().T @ dual.vectors[i, s])
            cross[i] = coef * residual[i]
    return AdjointIncoming(slab, diag, cross)


# ------------------------------------------------------------------ adjoint state


@dataclass(eq=False)
class AdjointState:
    """Forward and adjoint fields of all incoming columns at one energy."""

    solution: object
    residuals: np.ndarray
    incoming: AdjointIncoming
    g_in: np.ndarray
    g: np.ndarray

    @property
    def psi(self):
        return self.solution.psi

    def galerkin_residual(self):
        """Relative residual of ``(I + W^-1 G^H W V) g = g_in`` on the nodes."""
        sol = self.solution
        slab = sol.slab
        w = np.repeat(slab.w, slab.dim)[:, None]
        Vg = np.einsum("iab,ibp->iap", sol.V_nodes, self.g.reshape(slab.n_nodes, slab.dim, -1))
        lhs = self.g + (slab.G.conj().T @ (w * Vg.reshape(w.shape[0], -1))) / w
        scale = max(np.linalg.norm(self.g_in), 1e-300)
        return float(np.linalg.norm(lhs - self.g_in) / scale)


def adjoint_solve(solution, incoming):
    """Adjoint field ``g = g_in + g_out`` on the nodes of ``solution``'s slab."""
    g_in = incoming.field()
    g = solution.adjoint_solve(g_in)
    return g_in, g


# ------------------------------------------------------------------ parameterization


@dataclass(frozen=True)
class PotentialBasis:
    """Free coefficients ``kappa[j, k, c]`` of ``P_j(x) h_k(y) sigma_{channels[c]}``."""

    interval: tuple
    n_x: int
    n_k: int
    y_basis: str = "hermite"
    channels: tuple = (0,)

    def __post_init__(self):
        object.__setattr__(self, "interval", (float(self.interval[0]), float(self.interval[1])))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.y_basis == "uniform" and self.n_k != 0:
            raise ValueError("a uniform y profile takes n_k = 0")

    @property
    def shape(self):
        return (self.n_x + 1, self.n_k + 1, len(self.channels))

    @property
    def size(self):
        return int(np.prod(self.shape))

    def zeros(self):
        return np.zeros(self.size)

    def potential(self, kappa):
        coeffs = np.zeros((self.n_x + 1, self.n_k + 1, 4))
        coeffs[:, :, list(self.channels)] = np.asarray(kappa, dtype=float).reshape(self.shape)
        return PotentialRep(self.interval, coeffs, self.y_basis)

    def coefficients(self, V):
        """Flat ``kappa`` of ``V`` (which must share the interval and fit the basis)."""
        if V.interval != self.interval or V.y_basis != self.y_basis:
            raise ValueError("potential does not live on this basis")
        if V.n_x > self.n_x or V.n_k > self.n_k:
            raise ValueError("potential has more modes than the basis")
        out = np.zeros(self.shape)
        out[: V.n_x + 1, : V.n_k + 1] = V.coeffs[:, :, list(self.channels)]
        return out.ravel()

    def legendre_weights(self):
        """``1 / (2j + 1)`` per coefficient, the ``L^2`` norm of ``P_j`` up to a factor."""
        j = np.arange(self.n_x + 1)[:, None, None]
        return np.broadcast_to(1.0 / (2 * j + 1), self.shape).ravel()


class ForwardModel:
    """Slab operators at all energies, reused across iterates."""

    def __init__(self, basis, energies, n_y, n_nodes=None):
        self.basis = basis
        self.energies = tuple(float(E) for E in energies)
        self.n_y = int(n_y)

        def build(E):
            nodes = n_nodes or default_nodes(E, basis.interval, basis.n_x, n_y)
            return SlabOperator.build(E, basis.interval, n_y, nodes)

        with ThreadPoolExecutor(worker_count(len(self.energies))) as pool:
            self.slabs = list(pool.map(build, self.energies))
        full = potential_blocks(self.n_y, basis.n_k, basis.y_basis).reshape(basis.n_k + 1, 4, *(2 * [sb.channel_size(n_y)]))
        self.blocks = np.ascontiguousarray(full[:, list(basis.channels)].reshape(-1, *full.shape[2:]))
        self._legendre = [
            sb.legendre_table(basis.n_x, sb.to_reference(slab.x, basis.interval)) for slab in self.slabs
        ]

    def node_potential(self, kappa, s):
        k = np.asarray(kappa, dtype=float).reshape(self.basis.n_x + 1, -1)
        vx = self._legendre[s].T @ k
        return node_blocks(vx, self.blocks)

    def solve(self, kappa, s):
        slab = self.slabs[s]
        return slab.solve(self.node_potential(kappa, s))

    def tr(self, kappa):
        with ThreadPoolExecutor(worker_count(len(self.slabs))) as pool:
            return list(pool.map(lambda s: self.solve(kappa, s).alpha_out, range(len(self.slabs))))

    def gradient_terms(self, state, s):
        """``-2 Re sum_p <g^p, V_A psi^p>`` for every basis element ``A``."""
        slab = self.slabs[s]
        if state.solution.slab is not slab:
            raise ValueError("adjoint state was computed on a different grid")
        n, d = slab.n_nodes, slab.dim
        psi = np.ascontiguousarray(state.psi.reshape(n, d, -1).transpose(2, 0, 1))
        g = np.ascontiguousarray(state.g.reshape(n, d, -1).transpose(2, 0, 1))
        Q = pair_outer(psi, g)
        tr = trace_pairing(self.blocks, Q)
        return -2.0 * ((self._legendre[s] * slab.w) @ tr).real.ravel()


@dataclass
class Evaluation:
    objective: float
    tr: list
    gradient: np.ndarray = None
    states: list = field(default=None, repr=False)


def gradient(model, kappa, obs, s=None):
    """Objective and adjoint gradient; pass ``s`` to restrict to one energy."""
    return evaluate(model, kappa, obs, with_gradient=True, energies=None if s is None else [s])


def evaluate(model, kappa, obs, with_gradient=True, energies=None):
    if obs.energies != model.energies:
        raise ValueError("observation energies differ from the forward model's")
    which = range(len(model.slabs)) if energies is None else energies

    def one(s):
        sol = model.solve(kappa, s)
        r = obs.residual(s, sol.alpha_out)
        d = np.where(obs.masks[s], sol.alpha_out - obs.data[s], 0.0)
        value = float(np.sum((r * d.conj()).real))
        if not with_gradient:
            return value, sol.alpha_out, None, None
        inc = adjoint_incoming(r, model.slabs[s])
        g_in, g = adjoint_solve(sol, inc)
        state = AdjointState(sol, r, inc, g_in, g)
        return value, sol.alpha_out, model.gradient_terms(state, s), state

    with ThreadPoolExecutor(worker_count(len(which))) as pool:
        parts = list(pool.map(one, which))
    total = sum(p[0] for p in parts)
    trs = [p[1] for p in parts]
    if not with_gradient:
        return Evaluation(total, trs)
    return Evaluation(total, trs, np.sum([p[2] for p in parts], axis=0), [p[3] for p in parts])


# ------------------------------------------------------------------ descent


def probe_step(model, kappa, obs, current, scale=1.0, shrink=0.5, armijo=1e-4, max_trials=60):
    """Backtracking step size along ``-scale * gradient``.

    Starts from the step that would zero the linearized objective and halves
    until the Armijo condition holds.
    """
    d = scale * current.gradient
    g2 = float(current.gradient @ d)
    if g2 == 0.0:
        return 0.0
    eta = current.objective / g2
    for _ in range(max_trials):
        trial = evaluate(model, kappa - eta * d, obs, with_gradient=False).objective
        if trial <= current.objective - armijo * eta * g2:
            return eta
        eta *= shrink
    raise RuntimeError("backtracking failed to find a decreasing step")


def curvature_bound(model, kappa, obs, current, scale=1.0, iters=15, h=1e-4, seed=0):
    """Power-iteration estimate of the largest eigenvalue of ``M^(1/2) Hess M^(1/2)``.

    Hessian-vector products are forward differences of the adjoint gradient.
    """
    root = np.sqrt(np.broadcast_to(scale, kappa.shape))
    v = np.random.default_rng(seed).standard_normal(kappa.size)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        Hv = root * (evaluate(model, kappa + h * root * v, obs).gradient - current.gradient) / h
        lam = float(v @ Hv)
        norm = np.linalg.norm(Hv)
        if norm == 0.0:
            return 0.0
        v = Hv / norm
    return lam


def initial_step(model, kappa, obs, current, scale=1.0):
    """Backtracking probe, capped at ``1 / lambda_max`` so the fixed step stays stable."""
    eta = probe_step(model, kappa, obs, current, scale)
    lam = curvature_bound(model, kappa, obs, current, scale)
    return min(eta, 1.0 / lam) if lam > 0 else eta


@dataclass
class ReconstructionRun:
    """State of one gradient-descent reconstruction: iterates plus per-iteration records."""

    basis: PotentialBasis
    eta: float = None
    i_max: int = 100
    seed: int = 0
    line_search: bool = False
    precondition: bool = True
    history: list = field(default_factory=list)
    records: list = field(default_factory=list)

    @property
    def kappa(self):
        return self.history[-1]

    def scale(self):
        """Diagonal preconditioner: steps are taken in L2-normalized Legendre coordinates."""
        return 1.0 / self.basis.legendre_weights() if self.precondition else np.ones(self.basis.size)


def descend(run, model, obs, metrics=None, kappa0=None, progress=None):
    """Gradient descent with a fixed step; appends one record per iterate including the last.

    The update is ``kappa - eta * M * grad`` with ``M = run.scale()``.

    ``metrics`` is optional and must provide ``misfit(T)``, ``error(kappa)`` and
    ``error_avg(kappa)``; it only monitors and never influences the iterates.
    """
    if not run.history:
        run.history.append(run.basis.zeros() if kappa0 is None else np.asarray(kappa0, dtype=float))
    scale = run.scale()
    start = time.perf_counter()
    i0 = len(run.history) - 1
    for i in range(i0, run.i_max + 1):
        kappa = run.history[-1]
        last = i == run.i_max
        try:
            ev = evaluate(model, kappa, obs, with_gradient=not last)
            if not last and run.eta is None:
                run.eta = initial_step(model, kappa, obs, ev, scale)
        except TrappedModeError as exc:
            raise IterationError(i, exc) from exc
        record = {"iteration": i, "objective": ev.objective, "seconds": time.perf_counter() - start}
        if metrics is not None:
            record.update(misfit=metrics.misfit(ev.tr), err=metrics.error(kappa), err_avg=metrics.error_avg(kappa))
        run.records.append(record)
        if progress is not None:
            progress(record)
        if last:
            break
        eta = run.eta
        if run.line_search:
            eta = probe_step(model, kappa, obs, ev, scale)
        run.history.append(kappa - eta * scale * ev.gradient)
    return run


CSV_COLUMNS = ("iteration", "objective", "misfit", "err", "err_avg", "seconds")


def write_history(run, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore", restval="")
        writer.writeheader()
        for row in run.records:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def write_kappa(run, path):
    b = run.basis
    doc = {
        "interval": list(b.interval),
        "n_x": b.n_x,
        "n_k": b.n_k,
        "y_basis": b.y_basis,
        "channels": list(b.channels),
        "eta": run.eta,
        "precondition": run.precondition,
        "iterations": len(run.history) - 1,
        "kappa": [float(v) for v in run.kappa],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
