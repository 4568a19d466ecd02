"""Dual coordinate descent for linear max-margin problems with shared slacks.

Solves

    min_beta  1/2 |beta|^2 + sum_g C_g * xi_g
    s.t.      beta . x_j >= b_j - xi_g(j),   xi_g >= 0

over sparse rows x_j. Rows in the same group share one slack (one negative
image, say). A group with C_g = inf is a hard constraint group. The dual is

    max_alpha  sum_j alpha_j b_j - 1/2 |sum_j alpha_j x_j|^2
    s.t.       alpha >= 0,  sum_{j in g} alpha_j <= C_g

and beta = sum_j alpha_j x_j. Once a group's budget is used up, mass moves
between its rows by two-coordinate steps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp

from .errors import InputError


@dataclass(eq=False)
class QpResult:
    beta: np.ndarray
    alpha: np.ndarray
    slack: np.ndarray  # per group
    primal: float
    dual: float
    kkt_violation: float
    epochs: int
    converged: bool


@numba.njit(cache=True, nogil=True)
def _row_dot(indptr, indices, data, j, beta):
    s = 0.0
    for k in range(indptr[j], indptr[j + 1]):
        s += data[k] * beta[indices[k]]
    return s


@numba.njit(cache=True, nogil=True)
def _rows_dot(indptr, indices, data, i, j):
    # columns are sorted within rows
    a, ae = indptr[i], indptr[i + 1]
    b, be = indptr[j], indptr[j + 1]
    s = 0.0
    while a < ae and b < be:
        if indices[a] == indices[b]:
            s += data[a] * data[b]
            a += 1
            b += 1
        elif indices[a] < indices[b]:
            a += 1
        else:
            b += 1
    return s


@numba.njit(cache=True, nogil=True)
def _axpy_row(indptr, indices, data, j, scale, beta):
    for k in range(indptr[j], indptr[j + 1]):
        beta[indices[k]] += scale * data[k]


@numba.njit(cache=True, nogil=True)
def _kkt(indptr, indices, data, b, gptr, members, cap, alpha, beta, gsum, slack):
    worst = 0.0
    ng = gptr.shape[0] - 1
    for g in range(ng):
        xi = 0.0
        for m in range(gptr[g], gptr[g + 1]):
            j = members[m]
            grad = b[j] - _row_dot(indptr, indices, data, j, beta)
            if grad > xi:
                xi = grad
        slack[g] = xi
        for m in range(gptr[g], gptr[g + 1]):
            j = members[m]
            if alpha[j] > 0:
                grad = b[j] - _row_dot(indptr, indices, data, j, beta)
                if xi - grad > worst:
                    worst = xi - grad
        if gsum[g] < cap[g] * (1 - 1e-12) and xi > worst:
            worst = xi
    return worst


@numba.njit(cache=True, nogil=True)
def _solve(indptr, indices, data, b, gptr, members, cap, alpha, beta, max_epochs, tol, seed):
    np.random.seed(seed)
    n = b.shape[0]
    ng = gptr.shape[0] - 1
    group = np.empty(n, dtype=np.int64)
    for g in range(ng):
        for m in range(gptr[g], gptr[g + 1]):
            group[members[m]] = g
    q = np.empty(n)
    for j in range(n):
        q[j] = _rows_dot(indptr, indices, data, j, j)
    gsum = np.zeros(ng)
    for j in range(n):
        gsum[group[j]] += alpha[j]
    slack = np.zeros(ng)
    viol = _kkt(indptr, indices, data, b, gptr, members, cap, alpha, beta, gsum, slack)
    epoch = 0
    order = np.arange(n)
    while viol > tol and epoch < max_epochs:
        epoch += 1
        np.random.shuffle(order)
        for jj in range(n):
            j = order[jj]
            if q[j] <= 0:
                continue
            g = group[j]
            grad = b[j] - _row_dot(indptr, indices, data, j, beta)
            room = cap[g] - gsum[g]
            new = alpha[j] + grad / q[j]
            if new < 0:
                new = 0.0
            if new > alpha[j] + room:
                new = alpha[j] + room
            d = new - alpha[j]
            if d != 0.0:
                alpha[j] = new
                gsum[g] += d
                _axpy_row(indptr, indices, data, j, d, beta)
            if grad > tol and np.isfinite(cap[g]) and cap[g] - gsum[g] <= 1e-12 * cap[g]:
                # budget exhausted: take mass from the worst-fitting member
                best_i = -1
                best_gap = 0.0
                for m in range(gptr[g], gptr[g + 1]):
                    i = members[m]
                    if i == j or alpha[i] <= 0:
                        continue
                    gi = b[i] - _row_dot(indptr, indices, data, i, beta)
                    gj = b[j] - _row_dot(indptr, indices, data, j, beta)
                    if gj - gi > best_gap:
                        best_gap = gj - gi
                        best_i = i
                if best_i >= 0:
                    i = best_i
                    curv = q[j] + q[i] - 2.0 * _rows_dot(indptr, indices, data, i, j)
                    if curv > 0:
                        d = best_gap / curv
                        if d > alpha[i]:
                            d = alpha[i]
                        alpha[j] += d
                        alpha[i] -= d
                        _axpy_row(indptr, indices, data, j, d, beta)
                        _axpy_row(indptr, indices, data, i, -d, beta)
        viol = _kkt(indptr, indices, data, b, gptr, members, cap, alpha, beta, gsum, slack)
    return epoch, viol, slack


def _group_index(groups):
    groups = np.asarray(groups, dtype=np.int64)
    if groups.size and groups.min() < 0:
        raise InputError("group ids must be non-negative")
    ng = int(groups.max()) + 1 if groups.size else 0
    members = np.argsort(groups, kind="stable").astype(np.int64)
    counts = np.bincount(groups, minlength=ng)
    gptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return ng, gptr, members


def solve_qp(rows, targets, groups, caps, alpha0=None, max_epochs=20000, tol=1e-8, seed=0):
    """Solve the shared-slack problem above.

    ``rows`` is an (n, d) sparse or dense matrix, ``targets`` the b_j,
    ``groups`` the group id of each row and ``caps`` the C_g per group
    (``np.inf`` for hard constraints). Rows are visited in a seeded random
    order each epoch; the result is deterministic for a given seed.
    """
    x = sp.csr_matrix(rows, dtype=np.float64)
    x.sort_indices()
    n, dim = x.shape
    b = np.asarray(targets, dtype=np.float64)
    caps = np.asarray(caps, dtype=np.float64)
    if b.shape != (n,):
        raise InputError("one target per row required")
    ng, gptr, members = _group_index(groups)
    if caps.shape != (ng,) or np.any(caps <= 0):
        raise InputError("one positive cap per group required")
    alpha = np.zeros(n) if alpha0 is None else np.array(alpha0, dtype=np.float64)
    beta = np.asarray(x.T @ alpha).ravel() if n else np.zeros(dim)
    epochs, viol, slack = _solve(
        x.indptr.astype(np.int64), x.indices.astype(np.int64), x.data, b,
        gptr, members, caps, alpha, beta, max_epochs, tol, seed,
    )
    # recompute beta from alpha to shed accumulated rounding
    beta = np.asarray(x.T @ alpha).ravel() if n else np.zeros(dim)
    finite = np.isfinite(caps)
    primal = 0.5 * beta @ beta + float(np.sum(caps[finite] * slack[finite]))
    dual = float(alpha @ b - 0.5 * beta @ beta)
    return QpResult(beta, alpha, slack, primal, dual, float(viol), int(epochs), bool(viol <= tol))


def binary_svm(x, y, c, max_epochs=20000, tol=1e-8):
    """Linear hinge-loss SVM without an implicit bias: min 1/2|w|^2 + C sum hinge(y w.x)."""
    x = sp.csr_matrix(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rows = sp.diags(y) @ x
    n = x.shape[0]
    return solve_qp(rows, np.ones(n), np.arange(n), np.full(n, float(c)), max_epochs=max_epochs, tol=tol)
