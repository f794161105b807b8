"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

Backend selection: numba is used when importable unless the environment
variable ``TIMEALLOC_NUMBA`` is set to ``0``/``false``/``no``, in which
case the numpy implementations run.  Both implementations of every kernel
are importable directly (``*_np`` / ``*_nb``) so tests and the benchmark
can compare them; ``backend()`` reports which one public calls dispatch to.

Kernels:
  softmax_rows           row-wise stable softmax with positivity floor
  share_jacobian         derivative of predicted shares w.r.t. coefficients
  simplex_grid_max       exact max of sum_j w_j ln(T i_j / N) over the full
                         grid of positive integer compositions i of N
                         (dynamic program over nested part-sums; identical
                         value to brute-force enumeration, which
                         simplex_grid_max_enumerate provides for cross-checks)
  simplex_grid_argmax    same, also returning the maximizing grid point
"""

from __future__ import annotations

import os

import numpy as np

SHARE_FLOOR = 1e-12

_FLAG = os.environ.get("TIMEALLOC_NUMBA", "1").strip().lower()
_WANT_NUMBA = _FLAG not in ("0", "false", "no", "off")

if _WANT_NUMBA:
    try:
        from numba import njit

        _HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - depends on environment
        _HAVE_NUMBA = False
else:
    _HAVE_NUMBA = False


def backend() -> str:
    """Name of the backend public kernel calls dispatch to."""
    return "numba" if _HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def softmax_rows_np(Z: np.ndarray) -> np.ndarray:
    M = Z.max(axis=1, keepdims=True)
    E = np.exp(Z - M)
    P = E / E.sum(axis=1, keepdims=True)
    P = np.maximum(P, SHARE_FLOOR)
    return P / P.sum(axis=1, keepdims=True)


def share_jacobian_np(P: np.ndarray, X: np.ndarray) -> np.ndarray:
    """J[(i,j), (k,f)] = p_ij (delta_jk - p_ik) x_if, rows record-major.

    P is (n, 4) predicted shares, X is (n, F); the result is
    (3n, 3F) covering the three non-reference activities.
    """
    n, F = X.shape
    P3 = P[:, :3]
    eye = np.eye(3)
    A = P3[:, :, None] * (eye[None, :, :] - P3[:, None, :])
    J = A[:, :, :, None] * X[:, None, None, :]
    return J.reshape(n * 3, 3 * F)


def _log_part_table(n_parts: int, T: float) -> np.ndarray:
    lt = np.full(n_parts + 1, -np.inf)
    idx = np.arange(1, n_parts)
    lt[1:n_parts] = np.log(T * idx / n_parts)
    return lt


def simplex_grid_max_np(w: np.ndarray, n_parts: int, T: float) -> float:
    N = int(n_parts)
    if N < 4:
        raise ValueError("n_parts must be at least 4 (one unit per activity)")
    lt = _log_part_table(N, T)
    a = w[2] * lt
    b = w[3] * lt
    m2 = np.full(N + 1, -np.inf)
    for s in range(2, N - 1):
        m2[s] = np.max(a[1:s] + b[s - 1:0:-1])
    c = w[1] * lt
    m3 = np.full(N + 1, -np.inf)
    for t in range(3, N):
        m3[t] = np.max(c[1:t - 1] + m2[t - 1:1:-1])
    vals = w[0] * lt[1:N - 2] + m3[N - 1:2:-1]
    return float(vals.max())


def simplex_grid_argmax_np(w: np.ndarray, n_parts: int, T: float):
    N = int(n_parts)
    if N < 4:
        raise ValueError("n_parts must be at least 4 (one unit per activity)")
    lt = _log_part_table(N, T)
    a = w[2] * lt
    b = w[3] * lt
    m2 = np.full(N + 1, -np.inf)
    m2_arg = np.zeros(N + 1, dtype=np.int64)
    for s in range(2, N - 1):
        row = a[1:s] + b[s - 1:0:-1]
        k = int(np.argmax(row))
        m2[s] = row[k]
        m2_arg[s] = k + 1
    c = w[1] * lt
    m3 = np.full(N + 1, -np.inf)
    m3_arg = np.zeros(N + 1, dtype=np.int64)
    for t in range(3, N):
        row = c[1:t - 1] + m2[t - 1:1:-1]
        j = int(np.argmax(row))
        m3[t] = row[j]
        m3_arg[t] = j + 1
    vals = w[0] * lt[1:N - 2] + m3[N - 1:2:-1]
    i = int(np.argmax(vals)) + 1
    best = float(vals[i - 1])
    t = N - i
    j = int(m3_arg[t])
    s = t - j
    k = int(m2_arg[s])
    l = s - k
    return best, np.array([i, j, k, l], dtype=np.int64)


def simplex_grid_max_enumerate_np(w: np.ndarray, n_parts: int, T: float) -> float:
    """Brute-force enumeration of every grid point; small n_parts only."""
    N = int(n_parts)
    if N < 4:
        raise ValueError("n_parts must be at least 4 (one unit per activity)")
    lt = _log_part_table(N, T)
    best = -np.inf
    for i in range(1, N - 2):
        rem = N - i
        jj, kk = np.meshgrid(
            np.arange(1, rem - 1), np.arange(1, rem - 1), indexing="ij"
        )
        ll = rem - jj - kk
        ok = ll >= 1
        v = (
            w[0] * lt[i]
            + w[1] * lt[jj]
            + w[2] * lt[kk]
            + w[3] * lt[np.where(ok, ll, 1)]
        )
        v = np.where(ok, v, -np.inf)
        if v.size:
            best = max(best, float(v.max()))
    return best


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _softmax_rows_nb(Z):
        n, m = Z.shape
        P = np.empty((n, m))
        for i in range(n):
            mx = Z[i, 0]
            for j in range(1, m):
                if Z[i, j] > mx:
                    mx = Z[i, j]
            tot = 0.0
            for j in range(m):
                e = np.exp(Z[i, j] - mx)
                P[i, j] = e
                tot += e
            tot2 = 0.0
            for j in range(m):
                p = P[i, j] / tot
                if p < SHARE_FLOOR:
                    p = SHARE_FLOOR
                P[i, j] = p
                tot2 += p
            for j in range(m):
                P[i, j] /= tot2
        return P

    @njit(cache=True)
    def _share_jacobian_nb(P, X):
        n, F = X.shape
        J = np.zeros((n * 3, 3 * F))
        for i in range(n):
            for j in range(3):
                row = i * 3 + j
                for k in range(3):
                    d = 1.0 if j == k else 0.0
                    a = P[i, j] * (d - P[i, k])
                    for f in range(F):
                        J[row, k * F + f] = a * X[i, f]
        return J

    @njit(cache=True)
    def _grid_tables_nb(w, n_parts, T):
        N = n_parts
        lt = np.full(N + 1, -np.inf)
        for i in range(1, N):
            lt[i] = np.log(T * i / N)
        m2 = np.full(N + 1, -np.inf)
        m2_arg = np.zeros(N + 1, dtype=np.int64)
        for s in range(2, N - 1):
            best = -np.inf
            arg = 1
            for k in range(1, s):
                v = w[2] * lt[k] + w[3] * lt[s - k]
                if v > best:
                    best = v
                    arg = k
            m2[s] = best
            m2_arg[s] = arg
        m3 = np.full(N + 1, -np.inf)
        m3_arg = np.zeros(N + 1, dtype=np.int64)
        for t in range(3, N):
            best = -np.inf
            arg = 1
            for j in range(1, t - 1):
                v = w[1] * lt[j] + m2[t - j]
                if v > best:
                    best = v
                    arg = j
            m3[t] = best
            m3_arg[t] = arg
        return lt, m3, m3_arg, m2_arg

    @njit(cache=True)
    def _grid_argmax_nb(w, n_parts, T):
        N = n_parts
        lt, m3, m3_arg, m2_arg = _grid_tables_nb(w, n_parts, T)
        best = -np.inf
        i_star = 1
        for i in range(1, N - 2):
            v = w[0] * lt[i] + m3[N - i]
            if v > best:
                best = v
                i_star = i
        t = N - i_star
        j = m3_arg[t]
        s = t - j
        k = m2_arg[s]
        l = s - k
        parts = np.empty(4, dtype=np.int64)
        parts[0] = i_star
        parts[1] = j
        parts[2] = k
        parts[3] = l
        return best, parts

    @njit(cache=True)
    def _grid_max_enum_nb(w, n_parts, T):
        N = n_parts
        lt = np.full(N + 1, -np.inf)
        for i in range(1, N):
            lt[i] = np.log(T * i / N)
        best = -np.inf
        for i in range(1, N - 2):
            for j in range(1, N - i - 1):
                pij = w[0] * lt[i] + w[1] * lt[j]
                for k in range(1, N - i - j):
                    v = pij + w[2] * lt[k] + w[3] * lt[N - i - j - k]
                    if v > best:
                        best = v
        return best


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def softmax_rows(Z) -> np.ndarray:
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    if _HAVE_NUMBA:
        return _softmax_rows_nb(Z)
    return softmax_rows_np(Z)


def share_jacobian(P, X) -> np.ndarray:
    P = np.ascontiguousarray(P, dtype=np.float64)
    X = np.ascontiguousarray(X, dtype=np.float64)
    if _HAVE_NUMBA:
        return _share_jacobian_nb(P, X)
    return share_jacobian_np(P, X)


def simplex_grid_max(w, n_parts: int, T: float) -> float:
    w = np.ascontiguousarray(w, dtype=np.float64)
    if _HAVE_NUMBA:
        if n_parts < 4:
            raise ValueError("n_parts must be at least 4 (one unit per activity)")
        best, _ = _grid_argmax_nb(w, int(n_parts), float(T))
        return float(best)
    return simplex_grid_max_np(w, int(n_parts), float(T))


def simplex_grid_argmax(w, n_parts: int, T: float):
    w = np.ascontiguousarray(w, dtype=np.float64)
    if _HAVE_NUMBA:
        if n_parts < 4:
            raise ValueError("n_parts must be at least 4 (one unit per activity)")
        best, parts = _grid_argmax_nb(w, int(n_parts), float(T))
        return float(best), np.asarray(parts)
    return simplex_grid_argmax_np(w, int(n_parts), float(T))


def simplex_grid_max_enumerate(w, n_parts: int, T: float) -> float:
    w = np.ascontiguousarray(w, dtype=np.float64)
    if _HAVE_NUMBA:
        if n_parts < 4:
            raise ValueError("n_parts must be at least 4 (one unit per activity)")
        return float(_grid_max_enum_nb(w, int(n_parts), float(T)))
    return simplex_grid_max_enumerate_np(w, int(n_parts), float(T))
