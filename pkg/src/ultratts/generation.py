"""Static trajectory generation from [static | delta | delta-delta] predictions."""

import numpy as np
from scipy import sparse
from scipy.linalg import solveh_banded

from .errors import InvalidArgumentError
from .features import ACC_WIN, DELTA_WIN, FeatureMatrix


def window_matrices(T):
    """Sparse ``(T, T)`` operators for the delta and delta-delta windows (edge replicated)."""
    ops = []
    for win in (DELTA_WIN, ACC_WIN):
        rows, cols, vals = [], [], []
        for t in range(T):
            for k, w in zip((-1, 0, 1), win):
                if w == 0.0:
                    continue
                rows.append(t)
                cols.append(min(max(t + k, 0), T - 1))
                vals.append(w)
        ops.append(sparse.csr_matrix((vals, (rows, cols)), shape=(T, T)))
    return ops


def mlpg(means, variances):
    """Maximum-likelihood trajectory for one stream.

    ``means`` is ``(T, 3 * D)`` laid out ``[static | delta | delta-delta]`` and
    ``variances`` has length ``3 * D`` (time-invariant). Infinite variances
    switch a window off. Returns the ``(T, D)`` static trajectory.
    """
    means = np.asarray(means, dtype=float)
    T, D3 = means.shape
    D = D3 // 3
    var = np.asarray(variances, dtype=float).reshape(-1)
    if var.shape[0] != D3:
        raise InvalidArgumentError(f"expected {D3} variances, got {var.shape[0]}")
    if np.any(var <= 0):
        raise InvalidArgumentError("variances must be positive")
    prec = 1.0 / var
    D1, D2 = window_matrices(T)
    I = sparse.identity(T, format="csr")
    WtW = [(I.T @ I).tocsr(), (D1.T @ D1).tocsr(), (D2.T @ D2).tocsr()]
    Wt = [I.T.tocsr(), D1.T.tocsr(), D2.T.tocsr()]
    out = np.empty((T, D))
    for d in range(D):
        p = prec[[d, D + d, 2 * D + d]]
        R = p[0] * WtW[0] + p[1] * WtW[1] + p[2] * WtW[2]
        r = sum(p[k] * (Wt[k] @ means[:, k * D + d]) for k in range(3))
        out[:, d] = _solve_banded_sym(R, r, 2)
    return out


def _solve_banded_sym(R, r, bw):
    T = R.shape[0]
    ab = np.zeros((bw + 1, T))
    R = R.todia() if hasattr(R, "todia") else sparse.dia_matrix(R)
    for k in range(bw + 1):
        diag = R.diagonal(k)
        ab[bw - k, k:] = diag
    return solveh_banded(ab, r)


def generate_static(pred, mode="mlpg", variances=None):
    """Collapse every delta-bearing segment to its static trajectory.

    ``mode='slice'`` keeps the predicted static block; ``mode='mlpg'`` runs
    :func:`mlpg` per segment using the matching slice of ``variances``
    (one entry per column of ``pred``). Segments without deltas pass through.
    """
    if mode not in ("slice", "mlpg"):
        raise InvalidArgumentError(f"unknown generation mode {mode!r}")
    if mode == "mlpg":
        if variances is None:
            raise InvalidArgumentError("mlpg generation needs per-column variances")
        variances = np.asarray(variances, dtype=float).reshape(-1)
        if variances.shape[0] != pred.layout.total:
            raise InvalidArgumentError(
                f"got {variances.shape[0]} variances for {pred.layout.total} columns")
    blocks = []
    for s in pred.layout.segments:
        cols = pred.layout.columns(s.name)
        if not s.has_deltas:
            blocks.append(pred.frames[:, cols])
        elif mode == "slice":
            blocks.append(pred.frames[:, pred.layout.columns(s.name, "static")])
        else:
            blocks.append(mlpg(pred.frames[:, cols], variances[cols]))
    return FeatureMatrix(pred.layout.static_layout(), np.concatenate(blocks, axis=1),
                         pred.frame_shift)
