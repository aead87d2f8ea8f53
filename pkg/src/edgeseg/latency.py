"""Ground-truth latency model over heterogeneous radio technologies.

latency = base(tech_a, tech_b) + per_meter_ms * distance + N(0, jitter_sd)

Bluetooth links longer than ``bluetooth_range_m`` are unreachable and get
``ceiling_ms``. Jitter is clipped so that no reachable entry drops below a
small positive floor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import TECH_INDEX, CommTech, EdgeDevice, EndUser, LatencyParams

BT = TECH_INDEX[CommTech.BLUETOOTH]
MIN_LATENCY_MS = 1e-3


class TooFewAnchors(ValueError):
    pass


@dataclass(frozen=True)
class LatencyMatrix:
    device_device: np.ndarray  # (n_d, n_d), zero diagonal
    user_device: np.ndarray  # (n_u, n_d)
    measured_at: float = 0.0


def _tech_idx(t) -> int:
    return TECH_INDEX[CommTech(t)]


def latency_block(a_pos, a_tech, b_pos, b_tech, params: LatencyParams,
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Vectorized model: every row of ``a`` against every row of ``b``.

    ``a_tech``/``b_tech`` are integer technology indices.
    """
    a_pos = np.asarray(a_pos, dtype=float).reshape(-1, 2)
    b_pos = np.asarray(b_pos, dtype=float).reshape(-1, 2)
    a_tech = np.asarray(a_tech, dtype=np.intp)
    b_tech = np.asarray(b_tech, dtype=np.intp)
    base = np.asarray(params.tech_base_ms, dtype=float)
    dx = a_pos[:, 0:1] - b_pos[None, :, 0]
    dy = a_pos[:, 1:2] - b_pos[None, :, 1]
    dist = np.sqrt(dx * dx + dy * dy)
    lat = base[a_tech[:, None], b_tech[None, :]] + params.per_meter_ms * dist
    if params.jitter_sd_ms > 0 and rng is not None:
        lat = lat + rng.normal(0.0, params.jitter_sd_ms, size=lat.shape)
    np.maximum(lat, MIN_LATENCY_MS, out=lat)
    bt = (a_tech[:, None] == BT) | (b_tech[None, :] == BT)
    lat[bt & (dist > params.bluetooth_range_m)] = params.ceiling_ms
    np.minimum(lat, params.ceiling_ms, out=lat)
    return lat


def pairwise_latency(a_pos, a_tech, b_pos, b_tech, params: LatencyParams,
                     rng: Optional[np.random.Generator] = None) -> float:
    return float(latency_block(a_pos, [_tech_idx(a_tech)], b_pos, [_tech_idx(b_tech)], params, rng)[0, 0])


def device_block(pos, tech, params: LatencyParams, rng=None) -> np.ndarray:
    """Symmetric device-device block: both directions drawn, then averaged."""
    m = latency_block(pos, tech, pos, tech, params, rng)
    m = 0.5 * (m + m.T)
    np.fill_diagonal(m, 0.0)
    return m


def build_latency_matrix(users: Sequence[EndUser], devices: Sequence[EdgeDevice],
                         params: LatencyParams, rng=None, measured_at: float = 0.0) -> LatencyMatrix:
    if len(devices) < 3:
        raise TooFewAnchors(f"need at least 3 edge devices, got {len(devices)}")
    d_pos = [d.physical_pos for d in devices]
    d_tech = [_tech_idx(d.comm_tech) for d in devices]
    dd = device_block(d_pos, d_tech, params, rng)
    if users:
        ud = latency_block([u.physical_pos for u in users], [_tech_idx(u.comm_tech) for u in users],
                           d_pos, d_tech, params, rng)
    else:
        ud = np.zeros((0, len(devices)))
    return LatencyMatrix(dd, ud, measured_at)
