"""Hot loops with a numba backend and a pure-numpy fallback.

The backend is chosen once at import time from ``DIRAC_BACKEND``
(``numba`` by default, ``numpy`` to disable jitting). Both backends
expose the same functions and agree to rounding error.
"""

import os

import numpy as np

_REQUESTED = os.environ.get("DIRAC_BACKEND", "numba").strip().lower()
if _REQUESTED not in ("numba", "numpy"):
    raise ValueError(f"DIRAC_BACKEND must be 'numba' or 'numpy', got {_REQUESTED!r}")

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

BACKEND = "numba" if (_REQUESTED == "numba" and numba is not None) else "numpy"

_PI_QUARTER = np.pi**-0.25


# ---------------------------------------------------------------- numpy versions


def hermite_table_numpy(n_max, y):
    y = np.asarray(y)
    out = np.empty((n_max + 1,) + y.shape, dtype=np.result_type(y, float))
    out[0] = _PI_QUARTER * np.exp(-0.5 * y * y)
    if n_max >= 1:
        out[1] = np.sqrt(2.0) * y * out[0]
    for n in range(1, n_max):
        out[n + 1] = np.sqrt(2.0 / (n + 1)) * y * out[n] - np.sqrt(n / (n + 1)) * out[n - 1]
    return out


def node_blocks_numpy(vx, Y):
    return np.tensordot(vx, Y, axes=([1], [0]))


def block_green_product_numpy(Vb, G, channel, partner):
    n, d = Vb.shape[0], Vb.shape[1]
    return np.einsum("iac,icjb->iajb", Vb, G.reshape(n, d, n, d)).reshape(n * d, n * d)


def pair_outer_numpy(psi, lam):
    return np.einsum("pib,pia->iba", psi, lam.conj())


def trace_pairing_numpy(Y, Q):
    return np.einsum("kab,iba->ik", Y, Q)


# ---------------------------------------------------------------- numba versions

if BACKEND == "numba":

    @numba.njit(cache=True)
    def _hermite_table_nb(n_max, y):
        m = y.shape[0]
        out = np.empty((n_max + 1, m))
        for q in range(m):
            out[0, q] = _PI_QUARTER * np.exp(-0.5 * y[q] * y[q])
            if n_max >= 1:
                out[1, q] = np.sqrt(2.0) * y[q] * out[0, q]
            for n in range(1, n_max):
                out[n + 1, q] = (
                    np.sqrt(2.0 / (n + 1)) * y[q] * out[n, q]
                    - np.sqrt(n / (n + 1)) * out[n - 1, q]
                )
        return out

    @numba.njit(cache=True)
    def _node_blocks_nb(vx, Y):
        n, nk = vx.shape
        d = Y.shape[1]
        out = np.zeros((n, d, d), dtype=np.complex128)
        for i in range(n):
            for k in range(nk):
                c = vx[i, k]
                if c == 0.0:
                    continue
                for a in range(d):
                    for b in range(d):
                        out[i, a, b] += c * Y[k, a, b]
        return out

    @numba.njit(cache=True)
    def _block_green_product_nb(Vb, G, channel, partner):
        # G only couples slots of the same channel, so the inner sum over c
        # runs over at most two entries: b itself and its channel partner.
        n, d = Vb.shape[0], Vb.shape[1]
        out = np.zeros((n * d, n * d), dtype=np.complex128)
        for i in range(n):
            for j in range(n):
                for b in range(d):
                    col = j * d + b
                    g0 = G[i * d + b, col]
                    pb = partner[b]
                    g1 = G[i * d + pb, col] if pb >= 0 else 0.0
                    for a in range(d):
                        acc = Vb[i, a, b] * g0
                        if pb >= 0:
                            acc += Vb[i, a, pb] * g1
                        out[i * d + a, col] = acc
        return out

    @numba.njit(cache=True)
    def _pair_outer_nb(psi, lam):
        p_count, n, d = psi.shape
        out = np.zeros((n, d, d), dtype=np.complex128)
        for p in range(p_count):
            for i in range(n):
                for b in range(d):
                    pv = psi[p, i, b]
                    for a in range(d):
                        out[i, b, a] += pv * np.conj(lam[p, i, a])
        return out

    @numba.njit(cache=True)
    def _trace_pairing_nb(Y, Q):
        nk, d = Y.shape[0], Y.shape[1]
        n = Q.shape[0]
        out = np.zeros((n, nk), dtype=np.complex128)
        for i in range(n):
            for k in range(nk):
                acc = 0.0 + 0.0j
                for a in range(d):
                    for b in range(d):
                        acc += Y[k, a, b] * Q[i, b, a]
                out[i, k] = acc
        return out

    def hermite_table(n_max, y):
        y = np.asarray(y)
        if np.iscomplexobj(y):
            return hermite_table_numpy(n_max, y)
        flat = np.ascontiguousarray(y, dtype=float).ravel()
        return _hermite_table_nb(int(n_max), flat).reshape((n_max + 1,) + y.shape)

    def node_blocks(vx, Y):
        return _node_blocks_nb(
            np.ascontiguousarray(vx, dtype=float), np.ascontiguousarray(Y, dtype=np.complex128)
        )

    def block_green_product(Vb, G, channel, partner):
        return _block_green_product_nb(
            np.ascontiguousarray(Vb, dtype=np.complex128),
            np.ascontiguousarray(G, dtype=np.complex128),
            channel,
            partner,
        )

    def pair_outer(psi, lam):
        return _pair_outer_nb(
            np.ascontiguousarray(psi, dtype=np.complex128),
            np.ascontiguousarray(lam, dtype=np.complex128),
        )

    def trace_pairing(Y, Q):
        return _trace_pairing_nb(
            np.ascontiguousarray(Y, dtype=np.complex128),
            np.ascontiguousarray(Q, dtype=np.complex128),
        )

else:
    hermite_table = hermite_table_numpy
    node_blocks = node_blocks_numpy
    block_green_product = block_green_product_numpy
    pair_outer = pair_outer_numpy
    trace_pairing = trace_pairing_numpy
