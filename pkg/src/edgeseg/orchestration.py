"""Greedy task placement over a global or per-subspace device pool."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import Policy
from .segmentation import Segmentation


class DoubleRelease(RuntimeError):
    pass


class Outcome(str, enum.Enum):
    PLACED_EDGE = "PlacedEdge"
    FAILED_CAPACITY = "FailedCapacity"


@dataclass(frozen=True)
class PlacementDecision:
    task: int
    device: Optional[int]
    outcome: Outcome
    candidate_count: int
    est_latency_ms: float = float("nan")


class CapacityLedger:
    """Free VM slots per device plus the task -> device map used for releases."""

    def __init__(self, slots_total):
        self.total = np.array(slots_total, dtype=int)
        self.free = self.total.copy()
        self.placed: dict[int, int] = {}

    def occupy(self, task: int, device: int) -> None:
        if self.free[device] < 1:
            raise RuntimeError(f"device {device} has no free slot")
        self.free[device] -= 1
        self.placed[task] = device

    def release(self, task: int) -> int:
        device = self.placed.pop(task, None)
        if device is None:
            raise DoubleRelease(f"task {task} holds no slot")
        self.free[device] += 1
        return device

    @property
    def busy(self) -> int:
        return int((self.total - self.free).sum())


def candidate_pool(user: int, segmentation: Optional[Segmentation], n_devices: int, policy: Policy,
                   user_map_pos=None) -> np.ndarray:
    """Device ids a task of ``user`` may be placed on.

    Nomads borrow the devices of the subspace whose center is nearest in the
    latency map; without any subspace (or map position) they see every device.
    """
    everything = np.arange(n_devices)
    if policy == Policy.MONOLITHIC or segmentation is None or not segmentation.subspaces:
        return everything
    sid = int(segmentation.assignment[user])
    if sid < 0:
        if user_map_pos is None or np.isnan(user_map_pos).any():
            return everything
        d = ((segmentation.centers - np.asarray(user_map_pos, float)) ** 2).sum(-1)
        sid = int(np.argmin(d))
    return np.array(segmentation.subspaces[sid].devices, dtype=int)


def place_task(task: int, pool, latencies, ledger: CapacityLedger, rank_key=None) -> PlacementDecision:
    """Pick the free device with the lowest latency (or ``rank_key``), then most free slots, then lowest id.

    ``latencies`` and ``rank_key`` are indexed by device id. On success the
    chosen device loses one free slot.
    """
    pool = np.asarray(pool, dtype=int)
    latencies = np.asarray(latencies, dtype=float)
    key = latencies if rank_key is None else np.asarray(rank_key, dtype=float)
    free = ledger.free[pool]
    cand = pool[free > 0]
    if cand.size == 0:
        return PlacementDecision(task, None, Outcome.FAILED_CAPACITY, len(pool))
    k = key[cand]
    tied = cand[k == k.min()]
    if tied.size > 1:
        f = ledger.free[tied]
        tied = tied[f == f.max()]
    dev = int(tied.min())
    ledger.occupy(task, dev)
    return PlacementDecision(task, dev, Outcome.PLACED_EDGE, len(pool), float(latencies[dev]))


def release(task: int, ledger: CapacityLedger) -> int:
    return ledger.release(task)


def check_mobility_failure(user_map_pos, center, boundary: float, policy: Policy,
                           latency_to_device: float = 0.0, ceiling_ms: float = float("inf")) -> bool:
    """True once a running task has lost its user.

    Segmented policies: the user is outside the padded boundary of the
    subspace that held it at placement time. Monolithic (and tasks placed
    without a subspace): the serving device became unreachable.
    """
    if policy == Policy.MONOLITHIC or center is None:
        return bool(latency_to_device >= ceiling_ms)
    pos = np.asarray(user_map_pos, dtype=float)
    if np.isnan(pos).any():
        return True
    return bool(np.hypot(*(pos - np.asarray(center, float))) > boundary)


def mobility_failures(user_pos, centers, boundaries, by_subspace, lat_to_device, ceiling_ms) -> np.ndarray:
    """Vectorized :func:`check_mobility_failure` over running tasks."""
    d = np.hypot(user_pos[:, 0] - centers[:, 0], user_pos[:, 1] - centers[:, 1])
    with np.errstate(invalid="ignore"):
        lost_sub = ~(d <= boundaries)  # NaN position counts as lost
    lost_cov = lat_to_device >= ceiling_ms
    return np.where(by_subspace, lost_sub, lost_cov)
