"""TR matrices, two-slab merging and the binary cascade with interior recovery.

A TR matrix maps the incoming coefficients ``(alpha_-(b), alpha_+(a))`` of a slab
``[a, b]`` to the outgoing ones ``(alpha_-(a), alpha_+(b))``. Rows and columns
follow :func:`diracwall.spectral_basis.mode_labels`: the ``n_y + 1`` minus modes
first, then the ``n_y`` plus modes.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import json

import numpy as np

from . import spectral_basis as sb
from .greens_slab import SlabOperator, default_nodes, project_potential
from .parallel import worker_count

ADJACENCY_TOL = 1e-12
MERGE_COND_LIMIT = 1e12


class ResonantMergeError(RuntimeError):
    def __init__(self, condition):
        super().__init__(f"resonant merge: I - R12 L21 has condition estimate {condition:.3e}")
        self.condition = condition


@dataclass(frozen=True, eq=False)
class TRMatrix:
    E: float
    interval: tuple
    n_y: int
    matrix: np.ndarray

    def __post_init__(self):
        k = sb.channel_size(self.n_y)
        m = np.asarray(self.matrix, dtype=complex)
        if m.shape != (k, k):
            raise ValueError(f"TR matrix for n_y={self.n_y} must be {k}x{k}, got {m.shape}")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "interval", (float(self.interval[0]), float(self.interval[1])))

    @classmethod
    def free(cls, E, a, b, n_y):
        modes = sb.build_modes(E, n_y)
        phases = [np.exp(1j * m.eps * m.xi * (b - a)) for m in modes]
        return cls(float(E), (a, b), n_y, np.diag(phases))

    @property
    def labels(self):
        return sb.mode_labels(self.n_y)

    @property
    def split(self):
        return self.n_y + 1

    def blocks(self):
        s = self.split
        m = self.matrix
        return m[:s, :s], m[:s, s:], m[s:, :s], m[s:, s:]

    def to_json(self):
        return json.dumps(
            {
                "E": self.E,
                "interval": list(self.interval),
                "modes": [list(m) for m in self.labels],
                "entries": [[[z.real, z.imag] for z in row] for row in self.matrix],
            }
        )

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        n_y = max(n for n, _ in doc["modes"])
        if [tuple(m) for m in doc["modes"]] != [tuple(m) for m in sb.mode_labels(n_y)]:
            raise ValueError("mode list does not match the canonical ordering")
        entries = np.array(doc["entries"], dtype=float)
        return cls(doc["E"], tuple(doc["interval"]), n_y, entries[..., 0] + 1j * entries[..., 1])


def _check_pair(left, right):
    if abs(left.E - right.E) > 1e-12:
        raise ValueError(f"energies differ: {left.E} vs {right.E}")
    if left.n_y != right.n_y:
        raise ValueError("mode sets differ")
    if abs(left.interval[1] - right.interval[0]) > ADJACENCY_TOL:
        raise ValueError(f"intervals {left.interval} and {right.interval} are not adjacent")


def _coupling(left, right):
    _, _, L21, _ = left.blocks()
    _, R12, _, _ = right.blocks()
    A = np.eye(left.split) - R12 @ L21
    cond = np.linalg.cond(A, 1)
    if not np.isfinite(cond) or cond > MERGE_COND_LIMIT:
        raise ResonantMergeError(cond)
    return A


def intersection_matrix(left, right):
    """Map ``(alpha_-(b), alpha_+(a))`` to ``(alpha_-(c), alpha_+(c))`` at the shared point."""
    _check_pair(left, right)
    A = _coupling(left, right)
    _, _, L21, L22 = left.blocks()
    R11, R12, _, _ = right.blocks()
    minus = np.linalg.solve(A, np.hstack([R11, R12 @ L22]))
    plus = L21 @ minus
    plus[:, left.split :] += L22
    return np.vstack([minus, plus])


def merge(left, right):
    """TR matrix of the union of two adjacent slabs."""
    M = intersection_matrix(left, right)
    s = left.split
    L11, L12, _, _ = left.blocks()
    _, _, R21, R22 = right.blocks()
    top = L11 @ M[:s]
    top[:, s:] += L12
    bottom = R22 @ M[s:]
    bottom[:, :s] += R21
    return TRMatrix(left.E, (left.interval[0], right.interval[1]), left.n_y, np.vstack([top, bottom]))


@dataclass(eq=False)
class CascadeResult:
    tr: TRMatrix
    leaves: list = field(repr=False)
    intersections: list = field(repr=False)
    prefixes: list = field(repr=False)
    leaf_incoming: list = field(default=None, repr=False)

    def leaf_fields(self):
        """Nodal interior field of every leaf, shape ``(N, D)`` each."""
        if self.leaf_incoming is None:
            raise ValueError("cascade was run without incoming data")
        return [
            (sol.psi @ inc).reshape(sol.slab.n_nodes, sol.slab.dim)
            for sol, inc in zip(self.leaves, self.leaf_incoming)
        ]

    def field_at(self, leaf, z):
        sol = self.leaves[leaf]
        return sol.field_at(z) @ self.leaf_incoming[leaf]


def cascade(V, E, depth, n_y, n_nodes=None, incoming=None):
    """Solve ``2**depth`` equal leaves, merge them left to right and recover leaf fields."""
    if depth < 0:
        raise ValueError("depth must be non-negative")
    a, b = V.interval
    edges = np.linspace(a, b, 2**depth + 1)
    n_nodes = n_nodes or default_nodes(E, (a, edges[1]), V.n_x, n_y)

    def leaf(i):
        slab = SlabOperator.build(E, (edges[i], edges[i + 1]), n_y, n_nodes)
        return slab.solve(project_potential(V, slab.x, n_y))

    with ThreadPoolExecutor(worker_count(2**depth)) as pool:
        leaves = list(pool.map(leaf, range(2**depth)))
    trs = [TRMatrix(E, s.slab.interval, n_y, s.alpha_out) for s in leaves]
    prefixes, inter = [trs[0]], [None]
    for tr in trs[1:]:
        inter.append(intersection_matrix(prefixes[-1], tr))
        prefixes.append(merge(prefixes[-1], tr))
    result = CascadeResult(prefixes[-1], leaves, inter, prefixes)
    if incoming is not None:
        result.leaf_incoming = _back_substitute(inter, np.asarray(incoming, dtype=complex), n_y + 1)
    return result


def _back_substitute(inter, incoming, s):
    """Incoming data ``(alpha_-(right), alpha_+(left))`` of every leaf."""
    count = len(inter)
    plus_left = incoming[s:]
    minus_right = incoming[:s]
    out = [None] * count
    for i in range(count - 1, 0, -1):
        at_split = inter[i] @ np.concatenate([minus_right, plus_left])
        out[i] = np.concatenate([minus_right, at_split[s:]])
        minus_right = at_split[:s]
    out[0] = np.concatenate([minus_right, plus_left])
    return out


def extract_smatrix(tr):
    """Flux-normalized scattering matrix on the propagating modes, origin-referenced.

    Returns ``(S, labels)``; ``S`` is the identity when the potential vanishes.
    """
    modes = sb.build_modes(tr.E, tr.n_y)
    a, b = tr.interval
    keep = [i for i, m in enumerate(modes) if m.propagating]
    xi = np.array([modes[i].xi.real for i in keep])
    eps = np.array([modes[i].eps for i in keep])
    r_out = np.where(eps > 0, b, a)
    r_in = np.where(eps > 0, a, b)
    T = tr.matrix[np.ix_(keep, keep)]
    S = (
        np.sqrt(np.abs(xi)[:, None] / np.abs(xi)[None, :])
        * T
        * np.exp(-1j * xi * r_out)[:, None]
        * np.exp(1j * xi * r_in)[None, :]
    )
    return S, [modes[i].index for i in keep]
