"""Attractors, masks, the reconstruction loss and its gradient, and the
deep-clustering objectives.

Per-bin quantities are handled as "rows": an (N, ...) array with N = T*F in
time-major order. ``to_rows``/``from_rows`` convert from/to the F x T (x C)
spectrogram layout.
"""
from __future__ import annotations

import math

import numpy as np


class EmptySourceError(ValueError):
    pass


def to_rows(a: np.ndarray) -> np.ndarray:
    """(F, T, ...) -> (T*F, ...), time-major."""
    a = np.asarray(a)
    F, T = a.shape[:2]
    return np.swapaxes(a, 0, 1).reshape((T * F,) + a.shape[2:])


def from_rows(rows: np.ndarray, F: int, T: int) -> np.ndarray:
    """(T*F, ...) -> (F, T, ...)."""
    rows = np.asarray(rows)
    return np.swapaxes(rows.reshape((T, F) + rows.shape[1:]), 0, 1)


def salience_weights(log_mag: np.ndarray, threshold_pct: float) -> np.ndarray:
    """Binary weight per bin: 1 where the mixture log-magnitude is at or above
    the ``threshold_pct``-th percentile of the chunk. Accepts F x T or rows."""
    lm = np.asarray(log_mag)
    flat = to_rows(lm) if lm.ndim == 2 else lm.reshape(-1)
    if threshold_pct <= 0:
        return np.ones(flat.shape[0])
    cut = np.percentile(flat, threshold_pct)
    return (flat >= cut).astype(np.float64)


def _weighted_membership(y, w):
    y = np.asarray(y, dtype=np.float64)
    if w is None:
        return y
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape[0] != y.shape[0]:
        raise ValueError(f"weights have {w.shape[0]} rows, membership has {y.shape[0]}")
    return y * w[:, None]


def _per_source(cols, mat):
    """Row c = cols[:, c] @ mat, one product per source so each row's rounding
    does not depend on where that source sits in the column order."""
    return np.stack([np.ascontiguousarray(cols[:, c]) @ mat for c in range(cols.shape[1])])


def _logits(v, a):
    return np.stack([v @ np.ascontiguousarray(a[c]) for c in range(a.shape[0])], axis=-1)


def estimate_attractors(v, y, w=None) -> np.ndarray:
    """Salience-weighted centroid of each source's embeddings, shape (C, K)."""
    v = np.asarray(v)
    if v.shape[0] != np.shape(y)[0]:
        raise ValueError(f"embeddings have {v.shape[0]} rows, membership has {np.shape(y)[0]}")
    yw = _weighted_membership(y, w)
    counts = yw.sum(axis=0)
    if np.any(counts == 0):
        c = int(np.flatnonzero(counts == 0)[0])
        raise EmptySourceError(f"empty source under threshold: source {c} has no bins")
    return _per_source(yw, v) / counts[:, None]


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    # sorted before summing so the normalizer does not depend on source order
    return e / np.sort(e, axis=-1).sum(axis=-1, keepdims=True)


def mask_rows(v, a, head="sigmoid") -> np.ndarray:
    logits = _logits(np.asarray(v), np.asarray(a))
    if head == "sigmoid":
        return 0.5 * (np.tanh(0.5 * logits) + 1.0)
    if head == "softmax":
        return _softmax(logits)
    raise ValueError(f"unknown mask head {head!r}")


def masks(v, a, head="sigmoid", F=None, T=None) -> np.ndarray:
    """Masks from embedding/attractor similarity.

    Returns an F x T x C tensor when F and T are given, else (N, C) rows.
    """
    m = mask_rows(v, a, head)
    if F is None:
        return m
    return from_rows(m, F, T)


def loss(x_mag, s_mags, m, normalize=True) -> float:
    """Squared reconstruction error between clean magnitudes and masked mixture.

    ``x_mag`` is F x T, ``s_mags`` and ``m`` are F x T x C. With
    ``normalize`` the sum is divided by F*T*C.
    """
    x = np.asarray(x_mag)[..., None]
    err = np.asarray(s_mags) - x * np.asarray(m)
    # correctly rounded sum: independent of source ordering
    total = math.fsum((err * err).ravel())
    return total / err.size if normalize else total


def loss_backward(x_mag, s_mags, v, y, w=None, head="sigmoid",
                  flow_through_attractor=True, normalize=True):
    """Loss and its exact gradient with respect to the embeddings.

    Parameters
    ----------
    x_mag : (F, T) mixture magnitude
    s_mags : (F, T, C) clean source magnitudes
    v : (T*F, K) embeddings
    y : (T*F, C) membership; w : (T*F,) salience weights or None
    flow_through_attractor : bool
        If False the attractors are treated as constants.

    Returns
    -------
    (loss_value, grad_v)
    """
    v = np.asarray(v)
    x = to_rows(x_mag)
    s = to_rows(s_mags)
    yw = _weighted_membership(y, w)
    counts = yw.sum(axis=0)
    if np.any(counts == 0):
        c = int(np.flatnonzero(counts == 0)[0])
        raise EmptySourceError(f"empty source under threshold: source {c} has no bins")
    a = _per_source(yw, v) / counts[:, None]
    m = mask_rows(v, a, head)
    resid = s - x[:, None] * m
    scale = 1.0 / resid.size if normalize else 1.0
    value = math.fsum((resid * resid).ravel()) * scale
    dm = -2.0 * scale * x[:, None] * resid
    if head == "sigmoid":
        dlogit = dm * m * (1.0 - m)
    else:
        dlogit = m * (dm - np.sum(dm * m, axis=1, keepdims=True))
    grad = dlogit @ a
    if flow_through_attractor:
        da = dlogit.T @ v
        grad = grad + yw @ (da / counts[:, None])
    return value, grad


def dc_loss(v, y) -> float:
    """||YY^T - VV^T||_F^2 via the K x K / C x C identity."""
    v = np.asarray(v, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.sum((y.T @ y) ** 2) - 2.0 * np.sum((v.T @ y) ** 2)
                 + np.sum((v.T @ v) ** 2))


def dc_loss_backward(v, y):
    v = np.asarray(v, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    grad = 4.0 * (v @ (v.T @ v)) - 4.0 * (y @ (y.T @ v))
    return dc_loss(v, y), grad


def dc_reduced_loss(v, y) -> float:
    """||Y^T - U Y^T V V^T||_F^2 with U = (Y^T Y)^-1."""
    v = np.asarray(v, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    yty = y.T @ y
    if np.linalg.matrix_rank(yty) < yty.shape[0]:
        raise EmptySourceError("source with no bins: Y^T Y is singular")
    centroids = np.linalg.solve(yty, y.T @ v)
    diff = y.T - centroids @ v.T
    return float(np.sum(diff * diff))


def dc_centroids(v, y) -> np.ndarray:
    """U Y^T V: the C x K centroid matrix appearing in the reduced objective."""
    y = np.asarray(y, dtype=np.float64)
    yty = y.T @ y
    if np.linalg.matrix_rank(yty) < yty.shape[0]:
        raise EmptySourceError("source with no bins: Y^T Y is singular")
    return np.linalg.solve(yty, y.T @ np.asarray(v, dtype=np.float64))
