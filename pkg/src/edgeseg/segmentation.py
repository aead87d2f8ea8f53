"""Mobility segregation and lax clustering of the latency map into subspaces.

Users are referred to by integer index into the coordinate arrays. Low
mobility users are clustered with k-means followed by outlier removal; high
mobility users with greedy radial clusters whose boundary carries extra
padding. Points that end up in no cluster are nomads.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numba
import numpy as np

from .model import ClusteringMode, EndUser, ExperimentConfig, MobilityClass, Policy


class EmptyInput(ValueError):
    pass


class EmptyRoster(ValueError):
    pass


class Layer(str, enum.Enum):
    LOW = "Low"
    HIGH = "High"
    MIXED = "Mixed"  # single-layer policy: no mobility segregation


_LAYER_CODE = {Layer.LOW: 0, Layer.HIGH: 1, Layer.MIXED: -1}


@dataclass(frozen=True)
class MobilityLayers:
    low: frozenset
    high: frozenset


@dataclass(frozen=True)
class Cluster:
    center: np.ndarray
    radius: float
    members: np.ndarray  # point indices
    padding_fraction: float = 0.0
    devices: tuple = ()

    @property
    def boundary(self) -> float:
        return self.radius * (1.0 + self.padding_fraction)


@dataclass(frozen=True)
class Subspace:
    id: int
    layer: Layer
    center: np.ndarray
    radius: float
    padding_fraction: float
    devices: tuple
    roster_at_creation: frozenset
    created_at: float = 0.0

    @property
    def boundary(self) -> float:
        return self.radius * (1.0 + self.padding_fraction)


@dataclass(frozen=True)
class Segmentation:
    subspaces: tuple
    assignment: np.ndarray  # subspace index per user, -1 for nomads
    created_at: float = 0.0
    _roster: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self._roster is None:
            n = len(self.assignment)
            r = np.zeros((len(self.subspaces), n), dtype=bool)
            for s in self.subspaces:
                r[s.id, list(s.roster_at_creation)] = True
            object.__setattr__(self, "_roster", r)

    @property
    def nomads(self) -> frozenset:
        return frozenset(np.flatnonzero(self.assignment < 0).tolist())

    def members(self, sid: int) -> frozenset:
        return frozenset(np.flatnonzero(self.assignment == sid).tolist())

    @property
    def centers(self) -> np.ndarray:
        return np.array([s.center for s in self.subspaces]).reshape(-1, 2)

    @property
    def boundaries(self) -> np.ndarray:
        return np.array([s.boundary for s in self.subspaces], dtype=float)

    @property
    def layer_codes(self) -> np.ndarray:
        return np.array([_LAYER_CODE[s.layer] for s in self.subspaces], dtype=int)

    def churn(self) -> np.ndarray:
        """Per-subspace churn against the creation-time rosters."""
        if not self.subspaces:
            return np.zeros(0)
        current = self.assignment[None, :] == np.arange(len(self.subspaces))[:, None]
        changed = (current ^ self._roster).sum(axis=1)
        return changed / self._roster.sum(axis=1)

    def with_assignment(self, assignment: np.ndarray) -> "Segmentation":
        return replace(self, assignment=assignment, _roster=self._roster)


def _as_ids(users_or_speeds) -> tuple[np.ndarray, np.ndarray]:
    items = list(users_or_speeds)
    if items and isinstance(items[0], EndUser):
        return np.array([u.id for u in items]), np.array([u.speed for u in items], dtype=float)
    speeds = np.asarray(items, dtype=float)
    return np.arange(len(speeds)), speeds


def segregate(users, speed_threshold_mps: float) -> MobilityLayers:
    """Split users (or plain speeds, indexed by position) at the speed threshold."""
    ids, speeds = _as_ids(users)
    high = speeds > speed_threshold_mps
    return MobilityLayers(frozenset(ids[~high].tolist()), frozenset(ids[high].tolist()))


def mobility_class(speed: float, speed_threshold_mps: float) -> MobilityClass:
    return MobilityClass.HIGH if speed > speed_threshold_mps else MobilityClass.LOW


def select_k(n_points: int, target_cluster_size: int) -> int:
    if n_points <= 0:
        return 0
    k = max(1, math.floor(n_points / target_cluster_size + 0.5))
    return min(k, n_points)


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    dx = points[:, 0:1] - centers[None, :, 0]
    dy = points[:, 1:2] - centers[None, :, 1]
    return dx * dx + dy * dy


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = [points[rng.integers(n)]]
    d2 = _sq_dists(points, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.uniform(0, total), side="right"))
            idx = min(idx, n - 1)
        centers.append(points[idx])
        d2 = np.minimum(d2, _sq_dists(points, points[idx][None, :])[:, 0])
    return np.array(centers, dtype=float)


@numba.njit(cache=True)
def _hartigan(points, centers, labels):
    """Single-point moves that lower the sum of squares; updates in place, returns whether anything moved.

    Moving x from cluster a (size na) to b changes the objective by
    nb/(nb+1)|x-cb|^2 - na/(na-1)|x-ca|^2, which Lloyd steps never look at.
    """
    n, k = points.shape[0], centers.shape[0]
    cnt = np.zeros(k)
    for i in range(n):
        cnt[labels[i]] += 1.0
    moved_any = False
    for _ in range(100 * n):
        moved = False
        for i in range(n):
            a = labels[i]
            if cnt[a] <= 1.0:
                continue
            x0, x1 = points[i, 0], points[i, 1]
            da = (centers[a, 0] - x0) ** 2 + (centers[a, 1] - x1) ** 2
            cost = cnt[a] / (cnt[a] - 1.0) * da
            b, best = -1, np.inf
            for c in range(k):
                if c != a:
                    g = cnt[c] / (cnt[c] + 1.0) * ((centers[c, 0] - x0) ** 2 + (centers[c, 1] - x1) ** 2)
                    if g < best:
                        b, best = c, g
            if b >= 0 and best < cost - 1e-12:
                for j in range(2):
                    centers[a, j] = (centers[a, j] * cnt[a] - points[i, j]) / (cnt[a] - 1.0)
                    centers[b, j] = (centers[b, j] * cnt[b] + points[i, j]) / (cnt[b] + 1.0)
                cnt[a] -= 1.0
                cnt[b] += 1.0
                labels[i] = b
                moved = True
                moved_any = True
        if not moved:
            break
    return moved_any


def lloyd(points, k: int, seed: int = 0, max_iter: int = 100, n_init: int = 8):
    """Lloyd's algorithm from seeded k-means++ starts, polished by single-point moves; best of ``n_init`` runs.

    Returns ``(centers, labels, inertia_trace)`` where the trace lists the
    within-cluster sum of squares after every update step of the kept run.
    Centers of clusters that lose all points stay where they were.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(points) == 0:
        raise EmptyInput("no points to cluster")
    k = min(k, len(points))
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        centers = _kmeanspp(points, k, rng)
        labels = np.argmin(_sq_dists(points, centers), axis=1)
        trace = []
        rows = np.arange(len(points))
        for _ in range(max_iter):
            cnt = np.bincount(labels, minlength=k)
            sx = np.bincount(labels, weights=points[:, 0], minlength=k)
            sy = np.bincount(labels, weights=points[:, 1], minlength=k)
            nz = cnt > 0
            centers[nz, 0] = sx[nz] / cnt[nz]
            centers[nz, 1] = sy[nz] / cnt[nz]
            d2 = _sq_dists(points, centers)
            trace.append(float(d2[rows, labels].sum()))
            new = np.argmin(d2, axis=1)
            if np.array_equal(new, labels):
                break
            labels = new
        if _hartigan(points, centers, labels):
            trace.append(float(_sq_dists(points, centers)[rows, labels].sum()))
        if best is None or trace[-1] < best[2][-1]:
            best = (centers.copy(), labels.copy(), trace)
    return best


def kmeans_lax(points, k: int, outlier_radius: float, seed: int = 0, max_iter: int = 100,
               n_init: int = 8) -> tuple[list[Cluster], np.ndarray]:
    """k-means, then every point farther than ``outlier_radius`` from its centroid becomes a nomad.

    Centroids are not recomputed after the removal. A cluster's radius is the
    distance of its farthest remaining member; clusters left empty are dropped.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(points) == 0:
        raise EmptyInput("no points to cluster")
    centers, labels, _ = lloyd(points, k, seed=seed, max_iter=max_iter, n_init=n_init)
    dist = np.sqrt(((points - centers[labels]) ** 2).sum(-1))
    outlier = dist > outlier_radius
    clusters = []
    for c in range(len(centers)):
        sel = np.flatnonzero((labels == c) & ~outlier)
        if sel.size:
            clusters.append(Cluster(centers[c].copy(), float(dist[sel].max()), sel))
    return clusters, np.flatnonzero(outlier)


def radial_cluster(points, radius: float, padding_fraction: float, min_members: int,
                   ids: Optional[Sequence[int]] = None) -> tuple[list[Cluster], np.ndarray]:
    """Greedy densest-first radial clustering.

    Repeatedly take the unclaimed point with the most unclaimed neighbours
    within ``radius`` (ties go to the lowest id) and claim that
    neighbourhood, until the best candidate would have fewer than
    ``min_members`` members.
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(points)
    ids = np.arange(n) if ids is None else np.asarray(ids)
    if n == 0:
        return [], np.zeros(0, dtype=int)
    near = _sq_dists(points, points) <= radius * radius
    free = np.ones(n, dtype=bool)
    clusters = []
    while free.any():
        counts = near[:, free].sum(axis=1)
        counts[~free] = -1
        top = counts.max()
        if top < min_members:
            break
        cand = np.flatnonzero(counts == top)
        c = cand[np.argmin(ids[cand])]
        sel = np.flatnonzero(near[c] & free)
        clusters.append(Cluster(points[c].copy(), float(radius), sel, padding_fraction))
        free[sel] = False
    return clusters, np.flatnonzero(free)


def attach_devices(clusters: Iterable[Cluster], anchor_coords) -> list[Cluster]:
    """Give every cluster the anchors inside its padded boundary, or its single nearest anchor."""
    anchors = np.asarray(anchor_coords, dtype=float).reshape(-1, 2)
    out = []
    for c in clusters:
        d = np.sqrt(((anchors - c.center) ** 2).sum(-1))
        inside = np.flatnonzero(d <= c.boundary)
        if inside.size == 0:
            inside = np.array([int(np.argmin(d))])
        out.append(replace(c, devices=tuple(int(i) for i in inside)))
    return out


def strict_cluster(points, clusters: Sequence[Cluster]) -> np.ndarray:
    """Assign every point to the nearest cluster center; ties go to the lower index."""
    if not clusters:
        raise ValueError("strict assignment needs at least one cluster")
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    centers = np.array([c.center for c in clusters])
    return np.argmin(_sq_dists(points, centers), axis=1)


def cluster_health(roster_at_creation, current_members) -> float:
    """Churn = (lost + added) / |roster|; multiply by 100 for degradation in percent."""
    roster, current = set(roster_at_creation), set(current_members)
    if not roster:
        raise EmptyRoster("creation roster is empty")
    return (len(roster - current) + len(current - roster)) / len(roster)


# ---------------------------------------------------------------------------
# whole-population segmentation


def _strictify(points: np.ndarray, clusters: list[Cluster]) -> list[Cluster]:
    labels = strict_cluster(points, clusters)
    out = []
    for i, c in enumerate(clusters):
        sel = np.flatnonzero(labels == i)
        if sel.size == 0:
            continue
        d = np.sqrt(((points[sel] - c.center) ** 2).sum(-1)).max()
        out.append(replace(c, members=sel, radius=float(max(d, 1e-9))))
    return out


def build_segmentation(coords, high, anchor_coords, cfg: ExperimentConfig, policy: Policy = Policy.DUAL_LAYER,
                       mode: ClusteringMode = ClusteringMode.LAX, now: float = 0.0, seed: int = 0) -> Segmentation:
    """Cluster the localized users into subspaces.

    ``coords`` holds one latency-map point per user (NaN when the user could
    not be localized), ``high`` flags high-mobility users. DualLayer clusters
    the two mobility layers separately; SingleLayer runs lax k-means over
    everybody.
    """
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    high = np.asarray(high, dtype=bool)
    n = len(coords)
    localized = ~np.isnan(coords).any(axis=1)
    groups: list[tuple[Layer, np.ndarray]] = []
    if policy == Policy.DUAL_LAYER:
        groups = [(Layer.LOW, np.flatnonzero(localized & ~high)), (Layer.HIGH, np.flatnonzero(localized & high))]
    elif policy == Policy.SINGLE_LAYER:
        groups = [(Layer.MIXED, np.flatnonzero(localized))]

    subspaces = []
    assignment = np.full(n, -1, dtype=int)
    for layer, idx in groups:
        if idx.size == 0:
            continue
        pts = coords[idx]
        if layer == Layer.HIGH:
            clusters, _ = radial_cluster(pts, cfg.radial.radius, cfg.radial.padding_fraction,
                                         cfg.radial.min_members, ids=idx)
        else:
            k = select_k(len(pts), cfg.kmeans.target_cluster_size)
            clusters, _ = kmeans_lax(pts, k, cfg.kmeans.outlier_radius, seed=seed,
                                     max_iter=cfg.kmeans.max_iter, n_init=cfg.kmeans.n_init)
        if mode == ClusteringMode.STRICT and clusters:
            clusters = _strictify(pts, clusters)
        for c in attach_devices(clusters, anchor_coords):
            sid = len(subspaces)
            members = idx[c.members]
            assignment[members] = sid
            subspaces.append(Subspace(sid, layer, c.center, c.radius, c.padding_fraction, c.devices,
                                      frozenset(members.tolist()), now))
    seg = Segmentation(tuple(subspaces), assignment, now)
    if mode == ClusteringMode.LAX and subspaces:
        # leftovers already inside some padded boundary join it now, so an
        # immediate refresh without movement changes nothing
        joined = refresh_membership(seg, coords, high, mode).assignment
        if not np.array_equal(joined, assignment):
            subspaces = [replace(s, roster_at_creation=frozenset(np.flatnonzero(joined == s.id).tolist()))
                         for s in subspaces]
            seg = Segmentation(tuple(subspaces), joined, now)
    return seg


def refresh_membership(seg: Segmentation, coords, high, mode: ClusteringMode = ClusteringMode.LAX) -> Segmentation:
    """Re-derive membership from current positions; rosters stay as they were.

    Lax: a member stays while inside its own padded boundary, otherwise it
    joins the nearest same-layer subspace whose boundary contains it, or
    becomes a nomad. Strict: everyone localized goes to the nearest
    same-layer center.
    """
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    n = len(coords)
    if not seg.subspaces:
        return seg.with_assignment(np.full(n, -1, dtype=int))
    centers, bounds, codes = seg.centers, seg.boundaries, seg.layer_codes
    user_code = np.asarray(high, dtype=int)
    compat = (codes[None, :] < 0) | (codes[None, :] == user_code[:, None])
    d = np.sqrt(_sq_dists(coords, centers))
    localized = ~np.isnan(coords).any(axis=1)
    with np.errstate(invalid="ignore"):
        if mode == ClusteringMode.STRICT:
            cand = compat & localized[:, None]
            dm = np.where(cand, d, np.inf)
            best = np.argmin(dm, axis=1)
            new = np.where(np.isfinite(dm[np.arange(n), best]), best, -1)
        else:
            inside = (d <= bounds[None, :]) & compat
            cur = seg.assignment
            stay = (cur >= 0) & inside[np.arange(n), np.maximum(cur, 0)]
            dm = np.where(inside, d, np.inf)
            best = np.argmin(dm, axis=1)
            has = np.isfinite(dm[np.arange(n), best])
            new = np.where(stay, cur, np.where(has, best, -1))
    return seg.with_assignment(new.astype(int))


def mean_churn(seg: Segmentation) -> float:
    ch = seg.churn()
    return float(ch.mean()) if ch.size else 0.0


def resegment_step(seg: Segmentation, coords, high, anchor_coords, cfg: ExperimentConfig,
                   policy: Policy, mode: ClusteringMode, now: float = 0.0, seed: int = 0):
    """Refresh membership, measure mean churn, rebuild if it exceeds the threshold.

    Returns ``(segmentation, resegmented, churn_before_rebuild)``.
    """
    refreshed = refresh_membership(seg, coords, high, mode)
    churn = mean_churn(refreshed)
    if churn > cfg.churn_threshold:
        return build_segmentation(coords, high, anchor_coords, cfg, policy, mode, now, seed), True, churn
    return refreshed, False, churn


def maybe_resegment(seg: Segmentation, coords, high, anchor_coords, cfg: ExperimentConfig,
                    policy: Policy = Policy.DUAL_LAYER, mode: ClusteringMode = ClusteringMode.LAX,
                    now: float = 0.0, seed: int = 0) -> tuple[Segmentation, bool]:
    new, flag, _ = resegment_step(seg, coords, high, anchor_coords, cfg, policy, mode, now, seed)
    return new, flag


def segmentation_rows(seg: Segmentation, now: float):
    """(time, subspace id, layer, cx, cy, radius, members, devices, churn) rows for the debug dump."""
    churn = seg.churn()
    counts = np.bincount(seg.assignment[seg.assignment >= 0], minlength=len(seg.subspaces))
    return [(now, s.id, s.layer.value, float(s.center[0]), float(s.center[1]), s.radius,
             int(counts[s.id]), len(s.devices), float(churn[s.id])) for s in seg.subspaces]
