import csv
import json

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, strategies as st

from diracwall import adjoint_inversion as ai
from diracwall import greens_slab as gs
from diracwall import linearized as lz
from diracwall import spectral_basis as sb

INTERVAL = (-0.25, 0.25)
ENERGIES = (1.7, 2.6)
N_Y = 3


@pytest.fixture(scope="module")
def setup():
    basis = ai.PotentialBasis(INTERVAL, 2, 2, channels=(0, 1, 3))
    model = ai.ForwardModel(basis, ENERGIES, N_Y)
    rng = np.random.default_rng(7)
    ref = 0.4 * rng.standard_normal(basis.size)
    obs = ai.ObservationSet.from_preset("M0", ENERGIES, N_Y, model.tr(ref))
    kappa = 0.4 * rng.standard_normal(basis.size)
    return basis, model, obs, kappa, ref


def set_builder(preset, E, n_y):
    """Membership straight from the set-builder definitions."""
    modes = sb.build_modes(E, n_y)
    out = np.zeros((len(modes), len(modes)), dtype=bool)
    for i, m in enumerate(modes):
        for j, p in enumerate(modes):
            prop = m.propagating and p.propagating
            out[i, j] = {
                "M0": True,
                "MA": m.n in (0, 1) or p.n in (0, 1),
                "MB": m.n == p.n,
                "MT": i == j and prop,
                "MR": m.n == p.n >= 1 and m.eps != p.eps and prop,
            }[preset]
    return out


@pytest.mark.parametrize("preset", ai.PRESETS)
@pytest.mark.parametrize("E", [1.2, 2.3, 3.9])
def test_presets_match_definitions(preset, E):
    assert np.array_equal(ai.observation_mask(preset, E, 4), set_builder(preset, E, 4))


def test_unknown_preset():
    with pytest.raises(ValueError, match="preset"):
        ai.observation_mask("MX", 2.0, 2)


def test_misfit_zero_and_single_entry():
    k = sb.channel_size(N_Y)
    data = np.ones((2, k, k), dtype=complex)
    obs = ai.ObservationSet.from_preset("M0", ENERGIES, N_Y, data, weights=3.0)
    assert ai.misfit(data, obs) == 0
    T = data.copy()
    T[1, 2, 4] += 0.5j
    assert ai.misfit(T, obs) == pytest.approx(3.0 * 0.25)


def test_missing_entry_named():
    k = sb.channel_size(N_Y)
    obs = ai.ObservationSet.from_preset("M0", ENERGIES, N_Y, np.zeros((2, k, k)))
    T = np.zeros((2, k, k), dtype=complex)
    T[0, 1, 2] = np.nan
    with pytest.raises(ai.MissingEntryError) as info:
        ai.misfit(T, obs)
    assert info.value.entry == ((1, -1), (2, -1), ENERGIES[0])


def test_transmission_preset_is_masked_full_set(setup):
    _, model, obs, kappa, _ = setup
    T = model.tr(kappa)
    mt = ai.ObservationSet.from_preset("MT", ENERGIES, N_Y, obs.data)
    manual = 0.0
    for s, E in enumerate(ENERGIES):
        mask = set_builder("MT", E, N_Y)
        manual += np.sum(np.abs(T[s] - obs.data[s])[mask] ** 2)
    assert ai.misfit(T, mt) == pytest.approx(manual, rel=1e-13)


def test_bracket_level_zero():
    E = 2.2
    m = sb.make_mode(E, 0, -1)
    assert ai.adjoint_bracket(E, m, 0.0) == pytest.approx(E / m.theta)


def test_propagating_bracket_reduces_to_level_zero_form():
    E = 2.2
    d = sb.dual_basis(E, 2)
    for m in d.modes:
        if m.propagating:
            assert ai.adjoint_bracket(E, m, d.P[m.n]) == pytest.approx(E / m.theta, abs=1e-13)


def slab_state(setup, s=0, residual=None):
    _, model, obs, kappa, _ = setup
    sol = model.solve(kappa, s)
    r = obs.residual(s, sol.alpha_out) if residual is None else residual
    inc = ai.adjoint_incoming(r, model.slabs[s])
    g_in, g = ai.adjoint_solve(sol, inc)
    return sol, r, inc, g_in, g


def test_zero_residual_gives_zero_adjoint(setup):
    k = sb.channel_size(N_Y)
    sol, _, inc, g_in, g = slab_state(setup, residual=np.zeros((k, k)))
    assert not np.any(inc.diag) and not np.any(g)


@pytest.mark.parametrize("s", [0, 1])
def test_incoming_wave_is_weighted_extraction_adjoint(setup, s):
    """g_in = W^-1 B^H r: the source that makes the gradient exact for the discrete objective."""
    sol, r, _, g_in, _ = slab_state(setup, s)
    slab = sol.slab
    w = np.repeat(slab.w, slab.dim)[:, None]
    assert np.abs(g_in - slab.extraction.conj().T @ r / w).max() <= 1e-12 * np.abs(g_in).max()


def test_galerkin_residual(setup):
    sol, r, inc, g_in, g = slab_state(setup)
    state = ai.AdjointState(sol, r, inc, g_in, g)
    assert state.galerkin_residual() <= 1e-9


def test_zero_potential_adjoint_is_incoming(setup):
    _, model, obs, _, _ = setup
    sol = model.solve(np.zeros(model.basis.size), 0)
    inc = ai.adjoint_incoming(obs.residual(0, sol.alpha_out), model.slabs[0])
    g_in, g = ai.adjoint_solve(sol, inc)
    assert np.abs(g - g_in).max() <= 1e-14 * np.abs(g_in).max()


def test_perturbing_one_entry_touches_one_channel(setup):
    _, model, _, _, _ = setup
    slab = model.slabs[1]
    k = sb.channel_size(N_Y)
    r = np.zeros((k, k), dtype=complex)
    r[2, 4] = 0.3 - 0.1j
    inc = ai.adjoint_incoming(r, slab)
    changed = np.argwhere(inc.diag != 0)
    assert changed.tolist() == [[2, 4]]


def test_discrete_green_identity(setup, rng):
    """<g, (I + V G) h>_W = <r, B h> for nodal sources h, the discrete adjoint identity."""
    sol, r, _, _, g = slab_state(setup, 1)
    slab = sol.slab
    w = np.repeat(slab.w, slab.dim)
    A = np.eye(len(w)) + sla.block_diag(*sol.V_nodes) @ slab.G
    for _ in range(20):
        h = rng.standard_normal(len(w)) + 1j * rng.standard_normal(len(w))
        lhs = g.conj().T @ (w * (A @ h))
        rhs = r.conj().T @ (slab.extraction @ h)
        assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-12 * np.abs(rhs).max())


def test_gradient_zero_at_data(setup):
    _, model, obs, _, ref = setup
    ev = ai.evaluate(model, ref, obs)
    assert ev.objective <= 1e-28
    assert np.abs(ev.gradient).max() <= 1e-12


def test_gradient_central_differences(setup, rng):
    _, model, obs, kappa, _ = setup
    g = ai.gradient(model, kappa, obs).gradient
    for i in rng.choice(len(kappa), 6, replace=False):
        best = np.inf
        for h in (1e-4, 1e-5, 1e-6):
            e = np.zeros_like(kappa)
            e[i] = h
            fd = (ai.evaluate(model, kappa + e, obs, False).objective - ai.evaluate(model, kappa - e, obs, False).objective) / (2 * h)
            best = min(best, abs(fd - g[i]) / (abs(g[i]) + 1e-12))
        assert best <= 1e-5


def test_gradient_at_zero_matches_born_derivative(setup):
    """At V = 0 the TR derivative is the Born coefficient mapped back to TR scaling."""
    basis, model, _, _, ref = setup
    obs_list = []
    for s, E in enumerate(ENERGIES):
        modes = sb.build_modes(E, N_Y)
        prop = np.array([m.propagating for m in modes])
        obs_list.append(prop[:, None] & prop[None, :])
    data = np.array(model.tr(ref))
    obs = ai.ObservationSet(ENERGIES, N_Y, np.array(obs_list), data, 1.0)
    zero = basis.zeros()
    g = ai.gradient(model, zero, obs).gradient
    T0 = np.array(model.tr(zero))
    expected = np.zeros(basis.size)
    a, b = INTERVAL
    for s, E in enumerate(ENERGIES):
        modes = sb.build_modes(E, N_Y)
        keep = [i for i, m in enumerate(modes) if m.propagating]
        for A in range(basis.size):
            VA = basis.potential(np.eye(basis.size)[A])
            for i in keep:
                for j in keep:
                    m, p = modes[i], modes[j]
                    born = lz.born_forward(VA, [(m.index, p.index, E)]).get(m.index, p.index, E)
                    scale = np.sqrt(abs(m.xi.real) / abs(p.xi.real))
                    phase = np.exp(-1j * m.xi.real * (b if m.eps > 0 else a)) * np.exp(1j * p.xi.real * (a if p.eps > 0 else b))
                    dT = born / (scale * phase)
                    expected[A] += 2 * np.real(np.conj(T0[s, i, j] - data[s, i, j]) * dT)
    assert np.allclose(g, expected, rtol=1e-7, atol=1e-9 * np.abs(expected).max())


def test_grid_mismatch_rejected(setup):
    _, model, obs, kappa, _ = setup
    sol, r, inc, g_in, g = slab_state(setup, 0)
    with pytest.raises(ValueError, match="grid"):
        model.gradient_terms(ai.AdjointState(sol, r, inc, g_in, g), 1)


def test_energy_mismatch_rejected(setup):
    _, model, obs, kappa, _ = setup
    other = ai.ObservationSet.from_preset("M0", (1.7, 2.7), N_Y, obs.data)
    with pytest.raises(ValueError, match="energies"):
        ai.evaluate(model, kappa, other)


def test_basis_round_trip(setup, rng):
    basis = setup[0]
    kappa = rng.standard_normal(basis.size)
    assert np.array_equal(basis.coefficients(basis.potential(kappa)), kappa)
    assert basis.legendre_weights()[-1] == pytest.approx(1 / 5)


def test_probe_step_satisfies_armijo(setup):
    _, model, obs, _, _ = setup
    zero = model.basis.zeros()
    ev = ai.evaluate(model, zero, obs)
    eta = ai.probe_step(model, zero, obs, ev)
    trial = ai.evaluate(model, zero - eta * ev.gradient, obs, False).objective
    assert trial <= ev.objective - 1e-4 * eta * float(ev.gradient @ ev.gradient)


def test_descent_monotone_and_recorded(setup):
    _, model, obs, _, _ = setup
    run = ai.ReconstructionRun(model.basis, i_max=6)
    ai.descend(run, model, obs)
    obj = [r["objective"] for r in run.records]
    assert len(run.history) == 7 and len(run.records) == 7
    assert all(b <= a for a, b in zip(obj, obj[1:]))
    assert run.eta > 0


def test_descent_resumes_without_repeating(setup):
    _, model, obs, _, _ = setup
    run = ai.ReconstructionRun(model.basis, eta=0.01, i_max=2)
    ai.descend(run, model, obs)
    run.i_max = 4
    ai.descend(run, model, obs)
    assert [r["iteration"] for r in run.records] == [0, 1, 2, 2, 3, 4]
    assert len(run.history) == 5


def test_zero_residual_is_fixed_point(setup):
    _, model, obs, _, ref = setup
    run = ai.ReconstructionRun(model.basis, eta=0.05, i_max=3)
    ai.descend(run, model, obs, kappa0=ref)
    assert all(np.allclose(k, ref, atol=1e-12) for k in run.history)


def test_solver_failure_reports_iterate(setup, monkeypatch):
    _, model, obs, _, _ = setup
    monkeypatch.setattr(gs, "COND_LIMIT", 1.0)
    run = ai.ReconstructionRun(model.basis, eta=0.01, i_max=3)
    with pytest.raises(ai.IterationError, match="iterate 0") as info:
        ai.descend(run, model, obs, kappa0=np.ones(model.basis.size))
    assert info.value.iteration == 0


def test_history_and_kappa_files(setup, tmp_path):
    _, model, obs, _, _ = setup
    run = ai.ReconstructionRun(model.basis, eta=0.01, i_max=2)
    ai.descend(run, model, obs)
    ai.write_history(run, tmp_path / "h.csv")
    ai.write_kappa(run, tmp_path / "k.json")
    rows = list(csv.DictReader(open(tmp_path / "h.csv")))
    assert list(rows[0]) == list(ai.CSV_COLUMNS)
    assert len(rows) == 3
    doc = json.load(open(tmp_path / "k.json"))
    assert doc["iterations"] == 2 and len(doc["kappa"]) == model.basis.size


@given(scale=st.floats(0.05, 0.5))
def test_objective_nonnegative(setup, scale):
    _, model, obs, kappa, _ = setup
    assert ai.evaluate(model, scale * kappa, obs, False).objective >= 0
