"""Fast invariant suite behind ``diracwall verify``.

Each check returns ``(name, value, limit, ok)``; all run at small sizes in a few seconds.
"""

import numpy as np

from . import adjoint_inversion as ai
from . import linearized as lz
from .greens_slab import PotentialRep, build_slab, project_potential
from .tr_merge import TRMatrix, cascade, extract_smatrix

INTERVAL = (-0.3, 0.3)


def random_potential(rng, n_x=3, n_k=3, channels=(0, 1, 2, 3), scale=0.5, interval=INTERVAL):
    c = np.zeros((n_x + 1, n_k + 1, 4))
    c[:, :, list(channels)] = scale * rng.standard_normal((n_x + 1, n_k + 1, len(channels)))
    return PotentialRep(interval, c)


def _tr(V, E, n_y):
    slab = build_slab(E, V.interval, n_y, n_x=V.n_x)
    return TRMatrix(E, V.interval, n_y, slab.solve(project_potential(V, slab.x, n_y)).alpha_out)


def free_propagation(rng):
    V = PotentialRep.zeros(INTERVAL, 2, 2)
    err = 0.0
    for E in rng.uniform(0.2, 4.0, 4):
        tr = _tr(V, E, 3)
        free = TRMatrix.free(E, *INTERVAL, 3)
        S, _ = extract_smatrix(tr)
        err = max(err, np.abs(tr.matrix - free.matrix).max(), np.abs(S - np.eye(len(S))).max())
    return "free propagation", err, 1e-10


def unitarity(rng):
    V = random_potential(rng)
    err = 0.0
    for E in (1.1, 2.3, 3.7):
        S, _ = extract_smatrix(_tr(V, E, 6))
        err = max(err, np.linalg.norm(S.conj().T @ S - np.eye(len(S))))
    return "S unitarity", err, 1e-6


def merge_equivalence(rng):
    V = random_potential(rng)
    E = 2.1
    direct = cascade(V, E, 0, 5).tr.matrix
    split = cascade(V, E, 1, 5).tr.matrix
    return "merge vs direct solve", float(np.abs(direct - split).max()), 1e-8


def scalar_round_trip(rng):
    n, xi = 5, 1.3
    c = np.zeros((1, n + 1, 4))
    c[0, :, 0] = rng.standard_normal(n + 1)
    V = PotentialRep(INTERVAL, c, "scaled")
    data = lz.born_forward(V, lz.scalar_sample_plan(xi, n))
    v = lz.invert_scalar(xi, lz.reduce_scalar(data, xi, n))
    exact = lz.potential_fourier(V, [xi])[0][:, 0]
    return "Born scalar round trip", float(np.abs(v - exact).max()), 1e-10


def adjoint_gradient(rng):
    basis = ai.PotentialBasis(INTERVAL, 2, 2, channels=(0, 3))
    energies = (1.6, 2.4)
    model = ai.ForwardModel(basis, energies, 3)
    ref = 0.3 * rng.standard_normal(basis.size)
    obs = ai.ObservationSet.from_preset("M0", energies, 3, model.tr(ref))
    kappa = 0.3 * rng.standard_normal(basis.size)
    g = ai.gradient(model, kappa, obs).gradient
    worst, h = 0.0, 1e-5
    for i in rng.choice(basis.size, 3, replace=False):
        e = np.zeros(basis.size)
        e[i] = h
        fd = (ai.evaluate(model, kappa + e, obs, False).objective - ai.evaluate(model, kappa - e, obs, False).objective) / (2 * h)
        worst = max(worst, abs(fd - g[i]) / max(abs(fd), 1e-12))
    return "adjoint gradient vs FD", worst, 1e-5


CHECKS = (free_propagation, unitarity, merge_equivalence, scalar_round_trip, adjoint_gradient)


def run_checks(seed=0):
    rng = np.random.default_rng(seed)
    for check in CHECKS:
        name, value, limit = check(rng)
        yield name, float(value), limit, bool(value <= limit)
