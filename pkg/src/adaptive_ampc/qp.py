"""Dense strictly convex QP by the Goldfarb-Idnani dual active-set method.

Solves ``min 1/2 x^T G x + a^T x  s.t.  C x >= b`` with ``G`` positive definite.
The active-set projections are recomputed by a QR factorization of
``L^{-1} N`` each iteration (``G = L L^T``, ``N`` the active constraint normals),
which is cheap at the sizes used here (tens of variables).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

OPTIMAL = 0
INFEASIBLE = 1
MAX_ITER = 2


class QpError(ArithmeticError):
    pass


@dataclass
class QpResult:
    x: np.ndarray
    multipliers: np.ndarray  # one per row of C, >= 0
    active: np.ndarray  # indices of the final active set
    status: int
    iterations: int

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


@njit(cache=True)
def _solve_upper(R, w, q):
    r = np.zeros(q)
    for i in range(q - 1, -1, -1):
        acc = w[i]
        for j in range(i + 1, q):
            acc -= R[i, j] * r[j]
        r[i] = acc / R[i, i]
    return r


@njit(cache=True)
def _gi(G, a, C, b, tol, max_iter):
    n = G.shape[0]
    m = C.shape[0]
    L = np.linalg.cholesky(G)
    Linv = np.linalg.inv(L)
    x = -(Linv.T @ (Linv @ a))
    D = C @ Linv.T  # row j holds (L^{-1} c_j)^T
    norms = np.empty(m)
    for j in range(m):
        nj = 0.0
        for i in range(n):
            nj += C[j, i] * C[j, i]
        norms[j] = max(np.sqrt(nj), 1e-300)

    active = np.empty(n + 1, dtype=np.int64)
    is_active = np.zeros(m, dtype=np.bool_)
    u = np.zeros(n + 2)
    q = 0
    it = 0
    status = OPTIMAL
    while True:
        s = C @ x - b
        p = -1
        worst = 0.0
        for j in range(m):
            if is_active[j]:
                continue
            viol = s[j] / norms[j]
            if viol < -tol * max(1.0, abs(b[j]) / norms[j]) and viol < worst:
                worst = viol
                p = j
        if p < 0:
            break
        u[q] = 0.0
        sp = s[p]
        while True:
            it += 1
            if it > max_iter:
                status = MAX_ITER
                break
            d = D[p].copy()
            r = np.zeros(q)
            if q > 0:
                Bm = np.empty((n, q))
                for jj in range(q):
                    Bm[:, jj] = D[active[jj]]
                Q, R = np.linalg.qr(Bm)
                w = Q.T @ d
                r = _solve_upper(R, w, q)
                dproj = d - Q @ w
            else:
                dproj = d
            z = Linv.T @ dproj
            # partial (dual) step length
            t1 = np.inf
            kdrop = -1
            for jj in range(q):
                if r[jj] > 0.0:
                    ratio = u[jj] / r[jj]
                    if ratio < t1:
                        t1 = ratio
                        kdrop = jj
            zn = 0.0
            for i in range(n):
                zn += z[i] * C[p, i]
            dn = 0.0
            for i in range(n):
                dn += d[i] * d[i]
            if zn <= 1e-14 * dn:
                t2 = np.inf
            else:
                t2 = -sp / zn
            t = min(t1, t2)
            if t == np.inf:
                status = INFEASIBLE
                break
            if t2 == np.inf:
                for jj in range(q):
                    u[jj] -= t * r[jj]
                u[q] += t
                # drop constraint kdrop
                is_active[active[kdrop]] = False
                for jj in range(kdrop, q):
                    active[jj] = active[jj + 1]
                    u[jj] = u[jj + 1]
                q -= 1
                continue
            for i in range(n):
                x[i] += t * z[i]
            for jj in range(q):
                u[jj] -= t * r[jj]
            u[q] += t
            if t == t2:
                active[q] = p
                is_active[p] = True
                q += 1
                break
            is_active[active[kdrop]] = False
            for jj in range(kdrop, q):
                active[jj] = active[jj + 1]
                u[jj] = u[jj + 1]
            q -= 1
            sp = 0.0
            for i in range(n):
                sp += C[p, i] * x[i]
            sp -= b[p]
        if status != OPTIMAL:
            break
    mult = np.zeros(m)
    for jj in range(q):
        mult[active[jj]] = u[jj]
    return x, mult, active[:q].copy(), status, it


def solve_qp(G, a, C, b, tol: float = 1e-12, max_iter: int = 1000) -> QpResult:
    """Solve ``min 1/2 x'Gx + a'x s.t. Cx >= b``; raises QpError if G is not PD."""
    G = np.ascontiguousarray(G, dtype=float)
    a = np.ascontiguousarray(a, dtype=float)
    C = np.ascontiguousarray(np.atleast_2d(C), dtype=float).reshape(-1, G.shape[0])
    b = np.ascontiguousarray(b, dtype=float).reshape(C.shape[0])
    try:
        np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        raise QpError("QP Hessian is not positive definite") from None
    x, mult, active, status, it = _gi(G, a, C, b, tol, max_iter)
    return QpResult(x=x, multipliers=mult, active=np.sort(active), status=int(status), iterations=int(it))
