"""Virtual localization: a 2D latency map of devices (anchors) and users.

Anchors are embedded by weighted stress majorization (SMACOF). Users are then
placed one at a time against the fixed anchors, network-coordinates style.
Map units are milliseconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np

from .latency import LatencyMatrix, TooFewAnchors
from .model import LocalizationParams


class DegenerateMatrix(ValueError):
    pass


class InsufficientAnchors(ValueError):
    pass


@dataclass(frozen=True)
class Embedding:
    coords: np.ndarray
    stress: float
    trace: tuple = ()
    n_iter: int = 0


@dataclass(frozen=True)
class LatencyMap:
    anchor_coords: np.ndarray
    user_coords: np.ndarray  # NaN rows for users that could not be localized
    stress_value: float
    embedded_at: float
    device_ids: tuple = ()
    localized: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def _weights(delta: np.ndarray, ceiling_ms: Optional[float]) -> np.ndarray:
    w = np.ones_like(delta)
    if ceiling_ms is not None:
        w[delta >= ceiling_ms] = 0.0
    np.fill_diagonal(w, 0.0)
    return w


def normalized_stress(coords: np.ndarray, delta: np.ndarray, weights: Optional[np.ndarray] = None) -> float:
    """sqrt( sum_{i<j} w (d_ij - delta_ij)^2 / sum_{i<j} w delta_ij^2 )."""
    coords = np.asarray(coords, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if weights is None:
        weights = _weights(delta, None)
    d = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    iu = np.triu_indices(len(delta), 1)
    num = (weights[iu] * (d[iu] - delta[iu]) ** 2).sum()
    den = (weights[iu] * delta[iu] ** 2).sum()
    return float(np.sqrt(num / den)) if den > 0 else 0.0


def _smacof(delta, w, vinv, x, max_iter, tol):
    iu = np.triu_indices(len(delta), 1)
    den = (w[iu] * delta[iu] ** 2).sum()

    def raw(x):
        d = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
        return (w[iu] * (d[iu] - delta[iu]) ** 2).sum(), d

    s, d = raw(x)
    trace = [np.sqrt(s / den)]
    it = 0
    for it in range(1, max_iter + 1):
        with np.errstate(divide="ignore", invalid="ignore"):
            b = np.where(d > 0, -w * delta / d, 0.0)
        np.fill_diagonal(b, 0.0)
        b[np.diag_indices_from(b)] = -b.sum(axis=1)
        x = vinv @ (b @ x)
        s_new, d = raw(x)
        trace.append(np.sqrt(s_new / den))
        done = s_new == 0 or (s - s_new) / s < tol
        s = s_new
        if done:
            break
    return x, trace, it


def classical_scaling(delta: np.ndarray, dims: int = 2) -> np.ndarray:
    """Torgerson scaling: top eigenvectors of the double-centered squared latencies."""
    n = len(delta)
    j = np.eye(n) - 1.0 / n
    b = -0.5 * j @ (delta ** 2) @ j
    vals, vecs = np.linalg.eigh(b)
    order = np.argsort(vals)[::-1][:dims]
    return vecs[:, order] * np.sqrt(np.maximum(vals[order], 0.0))


def embed_devices(device_device, dims: int = 2, seed: int = 0, max_iter: int = 300, tol: float = 1e-9,
                  n_init: int = 4, ceiling_ms: Optional[float] = None) -> Embedding:
    """Embed the device-device latency block into ``dims`` dimensions.

    Majorization is started from the classical-scaling solution (when no
    entry is at the ceiling) and from ``n_init`` seeded random
    configurations; the lowest-stress run is kept and the
    returned configuration is centered on the origin. ``trace`` holds the
    normalized stress per iteration of the kept run.
    """
    delta = np.asarray(device_device, dtype=float)
    n = len(delta)
    if n < 3:
        raise TooFewAnchors(f"need at least 3 anchors, got {n}")
    if not np.allclose(delta, delta.T):
        raise ValueError("device-device matrix must be symmetric")
    w = _weights(delta, ceiling_ms)
    if not w.any():
        raise DegenerateMatrix("no usable off-diagonal latency")
    v = np.diag(w.sum(axis=1)) - w
    vinv = np.linalg.pinv(v)
    scale = delta[w > 0].mean()
    rng = np.random.default_rng(seed)

    starts = [rng.uniform(size=(n, dims)) * scale for _ in range(max(1, n_init))]
    off = ~np.eye(n, dtype=bool)
    if (w[off] > 0).all():
        starts.insert(0, classical_scaling(delta, dims))
    best = None
    for x0 in starts:
        x, trace, it = _smacof(delta, w, vinv, x0, max_iter, tol)
        if best is None or trace[-1] < best[1][-1]:
            best = (x, trace, it)
        if best[1][-1] < 1e-12:
            break
    x, trace, it = best
    x = x - x.mean(axis=0)
    return Embedding(x, float(trace[-1]), tuple(float(t) for t in trace), it)


def _dists(x, anchors):
    dx = x[:, 0:1] - anchors[None, :, 0]
    dy = x[:, 1:2] - anchors[None, :, 1]
    return dx, dy, np.sqrt(dx * dx + dy * dy)


def _objective(x, anchors, delta, w):
    # x: (m, 2); anchors (d, 2); delta/w: (m, d)
    r = _dists(x, anchors)[2] - delta
    return (w * r * r).sum(-1)


def place_users(latencies, anchor_coords, ceiling_ms: Optional[float] = None, seed: int = 0,
                max_iter: int = 50, tol: float = 1e-6, restarts: int = 0):
    """Batch user placement against fixed anchors.

    Minimizes sum_j w_j (|x - a_j| - delta_j)^2 per user with a damped
    Gauss-Newton (Levenberg-Marquardt) iteration started at the
    1/latency-weighted centroid of the three nearest anchors, plus
    ``restarts`` extra seeded random starts inside the anchor bounding box.

    Returns ``(coords, localized)``; rows with fewer than three reachable
    anchors are NaN and flagged False.
    """
    delta = np.atleast_2d(np.asarray(latencies, dtype=float))
    anchors = np.asarray(anchor_coords, dtype=float)
    m, nd = delta.shape
    w = np.ones_like(delta)
    if ceiling_ms is not None:
        w[delta >= ceiling_ms] = 0.0
    w[~np.isfinite(delta)] = 0.0
    localized = w.sum(axis=1) >= 3
    out = np.full((m, 2), np.nan)
    if not localized.any():
        return out, localized

    rows = np.flatnonzero(localized)
    dl, wl = delta[rows], w[rows]
    dl = np.where(wl > 0, dl, 0.0)

    near = np.argpartition(np.where(wl > 0, dl, np.inf), 2, axis=1)[:, :3]
    nd3 = np.take_along_axis(dl, near, axis=1)
    cw = 1.0 / np.maximum(nd3, 1e-9)
    start = (anchors[near] * cw[..., None]).sum(1) / cw.sum(1, keepdims=True)

    starts = [start]
    if restarts > 0:
        rng = np.random.default_rng(seed)
        lo, hi = anchors.min(0), anchors.max(0)
        pad = 0.1 * (hi - lo)
        rnd = rng.uniform(lo - pad, hi + pad, size=(restarts, len(rows), 2))
        starts.extend(rnd)
    k = len(starts)
    x = np.concatenate(starts, axis=0)
    D = np.tile(dl, (k, 1))
    W = np.tile(wl, (k, 1))

    x = _lm(np.ascontiguousarray(x), np.ascontiguousarray(anchors), np.ascontiguousarray(D),
            np.ascontiguousarray(W), max_iter, tol)
    if k > 1:
        f = _objective(x, anchors, D, W).reshape(k, len(rows))
        best = np.argmin(f, axis=0)
        x = x.reshape(k, len(rows), 2)[best, np.arange(len(rows))]
    out[rows] = x
    return out, localized


@numba.njit(cache=True)
def _lm(x, anchors, D, W, max_iter, tol):
    m, nd = D.shape
    for i in range(m):
        px, py = x[i, 0], x[i, 1]
        lam = 1e-3
        f = 0.0
        for j in range(nd):
            dx, dy = px - anchors[j, 0], py - anchors[j, 1]
            r = np.sqrt(dx * dx + dy * dy) - D[i, j]
            f += W[i, j] * r * r
        for _ in range(max_iter):
            if f <= 1e-30:
                break
            a11 = a12 = a22 = g0 = g1 = 0.0
            for j in range(nd):
                w = W[i, j]
                if w == 0.0:
                    continue
                dx, dy = px - anchors[j, 0], py - anchors[j, 1]
                dist = max(np.sqrt(dx * dx + dy * dy), 1e-12)
                ux, uy = dx / dist, dy / dist
                r = dist - D[i, j]
                a11 += w * ux * ux
                a12 += w * ux * uy
                a22 += w * uy * uy
                g0 += w * ux * r
                g1 += w * uy * r
            h11 = a11 * (1.0 + lam) + 1e-12
            h22 = a22 * (1.0 + lam) + 1e-12
            det = h11 * h22 - a12 * a12
            if abs(det) < 1e-300:
                det = 1e-300
            s0 = -(h22 * g0 - a12 * g1) / det
            s1 = -(h11 * g1 - a12 * g0) / det
            qx, qy = px + s0, py + s1
            fn = 0.0
            for j in range(nd):
                dx, dy = qx - anchors[j, 0], qy - anchors[j, 1]
                r = np.sqrt(dx * dx + dy * dy) - D[i, j]
                fn += W[i, j] * r * r
            small = np.hypot(s0, s1) <= 1e-10 * (1.0 + np.hypot(px, py))
            if fn < f:
                rel = (f - fn) / f
                px, py, f = qx, qy, fn
                lam *= 0.3
                if rel < tol:
                    break
            else:
                lam *= 10.0
                if lam > 1e12:
                    break
            if small:
                break
        x[i, 0], x[i, 1] = px, py
    return x


def place_user(latencies_to_devices, anchor_coords, seed: int = 0, max_iter: int = 50, tol: float = 1e-10,
               ceiling_ms: Optional[float] = None, restarts: int = 8) -> np.ndarray:
    """Place a single user; raises :class:`InsufficientAnchors` below three reachable anchors."""
    coords, ok = place_users(np.asarray(latencies_to_devices, dtype=float)[None, :], anchor_coords,
                             ceiling_ms=ceiling_ms, seed=seed, max_iter=max_iter, tol=tol, restarts=restarts)
    if not ok[0]:
        raise InsufficientAnchors("fewer than 3 reachable anchors")
    return coords[0]


def user_objective(x, latencies, anchor_coords, ceiling_ms: Optional[float] = None) -> np.ndarray:
    """Placement objective at one or many points ``x`` for a single user's latency vector."""
    delta = np.asarray(latencies, dtype=float)
    w = np.ones_like(delta)
    if ceiling_ms is not None:
        w[delta >= ceiling_ms] = 0.0
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return _objective(x, np.asarray(anchor_coords, float), np.broadcast_to(delta, (len(x), len(delta))),
                      np.broadcast_to(w, (len(x), len(delta))))


def refresh_map(matrix: LatencyMatrix, previous: Optional[LatencyMap], params: LocalizationParams,
                ceiling_ms: Optional[float] = None, device_ids: Optional[Sequence[int]] = None,
                seed: int = 0) -> LatencyMap:
    """Re-place every user; re-embed anchors only when the device set changed."""
    n_d = matrix.device_device.shape[0]
    ids = tuple(device_ids) if device_ids is not None else tuple(range(n_d))
    if previous is None or previous.device_ids != ids:
        emb = embed_devices(matrix.device_device, seed=seed, max_iter=params.max_iter, tol=params.tol,
                            n_init=params.n_init, ceiling_ms=ceiling_ms)
        anchors, stress, embedded_at = emb.coords, emb.stress, matrix.measured_at
    else:
        anchors, stress, embedded_at = previous.anchor_coords, previous.stress_value, previous.embedded_at
    if len(matrix.user_device):
        users, ok = place_users(matrix.user_device, anchors, ceiling_ms=ceiling_ms, seed=seed,
                                max_iter=params.user_max_iter, tol=params.user_tol,
                                restarts=params.user_restarts)
    else:
        users, ok = np.zeros((0, 2)), np.zeros(0, dtype=bool)
    return LatencyMap(anchors, users, stress, embedded_at, ids, ok)


def map_rows(lmap: LatencyMap, user_ids: Optional[Sequence[int]] = None):
    """(kind, id, x, y, stress) rows for the debug CSV dump."""
    rows = []
    for i, (x, y) in zip(lmap.device_ids, lmap.anchor_coords):
        rows.append(("device", i, float(x), float(y), lmap.stress_value))
    uids = user_ids if user_ids is not None else range(len(lmap.user_coords))
    for i, (x, y) in zip(uids, lmap.user_coords):
        rows.append(("user", i, float(x), float(y), lmap.stress_value))
    return rows
