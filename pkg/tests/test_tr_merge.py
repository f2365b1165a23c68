import numpy as np
import pytest
from hypothesis import given, strategies as st

from diracwall import spectral_basis as sb
from diracwall.greens_slab import PotentialRep, build_slab, project_potential
from diracwall.tr_merge import (
    ResonantMergeError,
    TRMatrix,
    cascade,
    extract_smatrix,
    intersection_matrix,
    merge,
)

from conftest import random_potential

N_Y = 4


def random_tr(rng, E, a, b, scale=0.3):
    """Small random perturbation of the free slab: well-conditioned merge inputs."""
    k = sb.channel_size(N_Y)
    base = TRMatrix.free(E, a, b, N_Y).matrix
    noise = scale * (rng.standard_normal((k, k)) + 1j * rng.standard_normal((k, k))) / k
    return TRMatrix(E, (a, b), N_Y, base + noise)


@given(E=st.floats(0.5, 3.0).filter(lambda e: min(abs(e * e - 2 * n) for n in range(N_Y + 1)) > 1e-3),
       c=st.floats(-0.4, 0.4))
def test_free_slabs_compose(E, c):
    merged = merge(TRMatrix.free(E, -0.5, c, N_Y), TRMatrix.free(E, c, 0.5, N_Y))
    assert np.allclose(merged.matrix, TRMatrix.free(E, -0.5, 0.5, N_Y).matrix, atol=1e-12)


def test_zero_width_identity_is_neutral(rng):
    R = random_tr(rng, 2.2, 0.0, 0.4)
    left = TRMatrix.free(2.2, 0.0, 0.0, N_Y)
    assert np.allclose(merge(left, R).matrix, R.matrix, atol=1e-14)


def test_zero_width_intersection_is_identity():
    free = TRMatrix.free(2.2, 0.1, 0.1, N_Y)
    assert np.allclose(intersection_matrix(free, free), np.eye(sb.channel_size(N_Y)))


def test_associativity(rng):
    A = random_tr(rng, 2.2, -0.3, -0.1)
    B = random_tr(rng, 2.2, -0.1, 0.1)
    C = random_tr(rng, 2.2, 0.1, 0.3)
    lhs = merge(merge(A, B), C).matrix
    rhs = merge(A, merge(B, C)).matrix
    assert np.abs(lhs - rhs).max() <= 1e-9


def test_intersection_composes_to_merge(rng):
    """Outgoing data of the union from the interior coefficients and the leaf blocks."""
    L = random_tr(rng, 2.2, -0.3, 0.0)
    R = random_tr(rng, 2.2, 0.0, 0.3)
    s = L.split
    M = intersection_matrix(L, R)
    data = rng.standard_normal(2 * s - 1) + 1j * rng.standard_normal(2 * s - 1)
    minus_c, plus_c = (M @ data)[:s], (M @ data)[s:]
    out_left = L.matrix @ np.concatenate([minus_c, data[s:]])
    out_right = R.matrix @ np.concatenate([data[:s], plus_c])
    merged = merge(L, R).matrix @ data
    assert np.allclose(merged[:s], out_left[:s], atol=1e-12)
    assert np.allclose(merged[s:], out_right[s:], atol=1e-12)


def test_merge_rejects_non_adjacent(rng):
    with pytest.raises(ValueError, match="adjacent"):
        merge(random_tr(rng, 2.2, 0.0, 0.1), random_tr(rng, 2.2, 0.2, 0.3))
    with pytest.raises(ValueError, match="energies"):
        merge(random_tr(rng, 2.2, 0.0, 0.1), random_tr(rng, 2.3, 0.1, 0.3))


def test_resonant_merge_detected():
    s = N_Y + 1
    k = sb.channel_size(N_Y)
    L = np.zeros((k, k), dtype=complex)
    R = np.zeros((k, k), dtype=complex)
    L[s:, :s] = np.eye(k - s, s)  # L21
    R[:s, s:] = np.eye(s, k - s)  # R12, so I - R12 L21 has a zero diagonal entry
    with pytest.raises(ResonantMergeError, match="resonant"):
        merge(TRMatrix(2.2, (0, 1), N_Y, L), TRMatrix(2.2, (1, 2), N_Y, R))


@pytest.mark.parametrize("depth", [1, 2])
def test_cascade_matches_direct_solve(rng, depth):
    V = random_potential(rng)
    direct = cascade(V, 2.5, 0, N_Y).tr.matrix
    split = cascade(V, 2.5, depth, N_Y).tr.matrix
    assert np.abs(direct - split).max() <= 1e-8


def test_depth_zero_is_slab_tr(rng):
    V = random_potential(rng)
    slab = build_slab(2.5, V.interval, N_Y, n_x=V.n_x)
    direct = slab.solve(project_potential(V, slab.x, N_Y)).alpha_out
    assert np.allclose(cascade(V, 2.5, 0, N_Y).tr.matrix, direct, atol=1e-13)


def test_interior_coefficients_match_direct_field(rng):
    V = random_potential(rng)
    E = 2.5
    K = sb.channel_size(N_Y)
    inc = np.eye(K)[:, :3]
    res = cascade(V, E, 1, N_Y, incoming=inc)
    slab = build_slab(E, V.interval, N_Y, n_x=V.n_x)
    direct = slab.solve(project_potential(V, slab.x, N_Y), inc)
    field = direct.field_at([0.0])[0]
    # coefficients at the split point, referenced at the point itself
    coeffs = slab.dual.extract(field.T).T
    inter = res.intersections[1] @ inc
    s = N_Y + 1
    modes = slab.modes
    assert np.allclose(coeffs[:s], inter[:s], atol=1e-8)
    assert np.allclose(coeffs[s:], inter[s:], atol=1e-8)
    assert [m.eps for m in modes[:s]] == [-1] * s


def test_leaf_fields_continuous(rng):
    V = random_potential(rng)
    inc = np.eye(sb.channel_size(N_Y))[:, [0, 5]]
    res = cascade(V, 2.5, 2, N_Y, incoming=inc)
    edges = np.linspace(*V.interval, 5)
    for i in range(3):
        left = res.field_at(i, [edges[i + 1]])
        right = res.field_at(i + 1, [edges[i + 1]])
        assert np.linalg.norm(left - right) <= 1e-7


def test_free_smatrix_is_identity():
    S, labels = extract_smatrix(TRMatrix.free(3.3, -0.2, 0.5, 6))
    assert np.allclose(S, np.eye(len(labels)), atol=1e-12)
    assert all(sb.make_mode(3.3, *m).propagating for m in labels)


def test_single_channel_below_first_edge(rng):
    V = random_potential(rng)
    tr = cascade(V, 1.1, 0, 3).tr
    S, labels = extract_smatrix(tr)
    assert labels == [(0, -1)]
    assert abs(S[0, 0]) == pytest.approx(1.0, abs=1e-10)


def test_json_round_trip(rng):
    tr = random_tr(rng, 2.2, -0.3, 0.3)
    back = TRMatrix.from_json(tr.to_json())
    assert np.array_equal(back.matrix, tr.matrix)
    assert back.interval == tr.interval and back.E == tr.E


def test_json_rejects_wrong_mode_order(rng):
    import json

    doc = json.loads(random_tr(rng, 2.2, -0.3, 0.3).to_json())
    doc["modes"] = doc["modes"][::-1]
    with pytest.raises(ValueError, match="ordering"):
        TRMatrix.from_json(json.dumps(doc))


def test_shape_validation():
    with pytest.raises(ValueError):
        TRMatrix(2.0, (0, 1), 2, np.eye(4))
