"""Movement models: random-waypoint pedestrians and heading-persistent vehicles.

The array functions step many users at once and take their random numbers
as arguments, so the caller decides how streams are seeded. The scalar
``step_pedestrian``/``step_vehicle`` wrappers draw from a generator.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class MobilityState:
    waypoint: tuple = (0.0, 0.0)
    heading: float = 0.0
    speed: float = 0.0
    dwell_until: float = 0.0


def pedestrian_arrays(pos, waypoint, speed, dwell_until, now, dt, area, u_pause, u_wx, u_wy, u_speed,
                      pause_range=(0.0, 30.0), speed_range=(0.0, 2.0)):
    """Advance pedestrians by ``dt`` seconds starting at time ``now``.

    ``u_*`` are uniform(0, 1) draws, one per user, consumed only by users
    that reach their waypoint during this step. Returns new
    ``(pos, waypoint, speed, dwell_until)`` arrays.
    """
    pos = np.array(pos, dtype=float)
    waypoint = np.array(waypoint, dtype=float)
    speed = np.array(speed, dtype=float)
    dwell_until = np.array(dwell_until, dtype=float)
    if dt <= 0 or len(pos) == 0:
        return pos, waypoint, speed, dwell_until
    # time left for walking once any current pause is over
    budget = np.clip(now + dt - np.maximum(dwell_until, now), 0.0, dt)
    vec = waypoint - pos
    dist = np.hypot(vec[:, 0], vec[:, 1])
    reach = speed * budget
    arrive = (dist <= reach) & (budget > 0) & (speed > 0)
    move = ~arrive & (dist > 0) & (budget > 0)
    frac = np.where(move, reach / np.where(dist > 0, dist, 1.0), 0.0)
    pos = pos + vec * frac[:, None]
    if arrive.any():
        t_arr = np.maximum(dwell_until, now) + dist / np.where(speed > 0, speed, 1.0)
        pos[arrive] = waypoint[arrive]
        lo, hi = pause_range
        dwell_until[arrive] = t_arr[arrive] + lo + (hi - lo) * np.asarray(u_pause)[arrive]
        waypoint[arrive, 0] = area[0] * np.asarray(u_wx)[arrive]
        waypoint[arrive, 1] = area[1] * np.asarray(u_wy)[arrive]
        slo, shi = speed_range
        speed[arrive] = slo + (shi - slo) * np.asarray(u_speed)[arrive]
    np.clip(pos[:, 0], 0.0, area[0], out=pos[:, 0])
    np.clip(pos[:, 1], 0.0, area[1], out=pos[:, 1])
    return pos, waypoint, speed, dwell_until


def vehicle_arrays(pos, heading, speed, dt, area, z_heading, heading_sd=0.2):
    """Perturb headings by ``heading_sd * z`` then drive straight, reflecting off the walls."""
    pos = np.array(pos, dtype=float)
    heading = np.array(heading, dtype=float)
    if dt <= 0 or len(pos) == 0:
        return pos, heading
    heading = heading + heading_sd * np.asarray(z_heading, dtype=float)
    step = np.asarray(speed, dtype=float) * dt
    x = pos[:, 0] + step * np.cos(heading)
    y = pos[:, 1] + step * np.sin(heading)
    w, h = area
    lo = x < 0
    x[lo] = -x[lo]
    heading[lo] = np.pi - heading[lo]
    hi = x > w
    x[hi] = 2 * w - x[hi]
    heading[hi] = np.pi - heading[hi]
    lo = y < 0
    y[lo] = -y[lo]
    heading[lo] = -heading[lo]
    hi = y > h
    y[hi] = 2 * h - y[hi]
    heading[hi] = -heading[hi]
    heading = np.mod(heading, 2 * np.pi)
    pos = np.stack([np.clip(x, 0.0, w), np.clip(y, 0.0, h)], axis=1)
    return pos, heading


def step_pedestrian(position, state: MobilityState, dt_s: float, area, rng: np.random.Generator,
                    now: float = 0.0, pause_range=(0.0, 30.0), speed_range=(0.0, 2.0)):
    u = rng.uniform(size=4)
    p, wp, sp, dw = pedestrian_arrays([position], [state.waypoint], [state.speed], [state.dwell_until], now, dt_s,
                                      area, u[:1], u[1:2], u[2:3], u[3:], pause_range, speed_range)
    return (float(p[0, 0]), float(p[0, 1])), replace(state, waypoint=(float(wp[0, 0]), float(wp[0, 1])),
                                                       speed=float(sp[0]), dwell_until=float(dw[0]))


def step_vehicle(position, state: MobilityState, dt_s: float, area, rng: np.random.Generator,
                 heading_sd: float = 0.2):
    z = rng.standard_normal(1)
    p, hd = vehicle_arrays([position], [state.heading], [state.speed], dt_s, area, z, heading_sd)
    return (float(p[0, 0]), float(p[0, 1])), replace(state, heading=float(hd[0]))
