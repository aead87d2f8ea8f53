"""Fixed-increment simulation loop.

Each tick runs, in order: mobility, latency measurement, localization,
segmentation upkeep, mobility-failure checks, task completions, and finally
generation and placement of the tasks that arrived during the tick. Task
completions are rounded up to the enclosing tick boundary.

All randomness is drawn from named substreams of the run seed, and the task
stream never depends on the policy, so runs that differ only in policy see
exactly the same users, movements and tasks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._rng import substream
from .latency import device_block, latency_block
from .localization import LatencyMap, embed_devices, place_users
from .mobility import pedestrian_arrays, vehicle_arrays
from .model import (ClusteringMode, ExperimentConfig, PlacementMetric, Policy, ServiceProfile, ServiceType,
                    TaskState, validate_config)
from .orchestration import CapacityLedger, mobility_failures, place_task
from .segmentation import Segmentation, build_segmentation, resegment_step

log = logging.getLogger(__name__)

SERVICE_ORDER = tuple(ServiceType)

# task state codes in the per-task arrays
PENDING, RUNNING, COMPLETED, FAILED_MOBILITY, FAILED_CAPACITY = range(5)
STATE_NAMES = {PENDING: TaskState.PENDING, RUNNING: TaskState.RUNNING, COMPLETED: TaskState.COMPLETED,
               FAILED_MOBILITY: TaskState.FAILED_MOBILITY, FAILED_CAPACITY: TaskState.FAILED_CAPACITY}


class SimulationError(RuntimeError):
    pass


@dataclass
class SimClock:
    tick_s: float
    end_s: float
    warmup_s: float
    ticks: int = 0

    @property
    def now_s(self) -> float:
        return self.ticks * self.tick_s

    @property
    def n_ticks(self) -> int:
        return int(round(self.end_s / self.tick_s))

    def advance(self) -> float:
        self.ticks += 1
        return self.now_s


@dataclass
class TaskLedger:
    generated: int = 0
    completed: int = 0
    failed_mobility: int = 0
    failed_capacity: int = 0
    in_flight: int = 0

    def balanced(self) -> bool:
        return self.generated == self.completed + self.failed_mobility + self.failed_capacity + self.in_flight


@dataclass
class MetricsReport:
    policy: str
    clustering_mode: str
    placement_metric: str
    n_users: int
    seed: int
    generated: int
    completed: int
    failed_mobility: int
    failed_capacity: int
    in_flight: int
    offloaded: int
    mean_delay_ms: float
    p50_delay_ms: float
    p95_delay_ms: float
    mobility_failure_rate: float
    capacity_failure_rate: float
    mean_churn_pct: float
    resegmentations: int
    mean_nomad_fraction: float
    mean_subspaces: float
    map_stress: float
    empty: bool


def task_delay_ms(latency_ms, upload_kb, download_kb, bandwidth_kbps: float):
    """Round trip plus payload transfer: 2 L + (up + down) / bandwidth, in ms."""
    return 2.0 * latency_ms + (upload_kb + download_kb) / bandwidth_kbps * 1000.0


def arrival_times(profile: ServiceProfile, end_s: float, rng: np.random.Generator, start_s: float = 0.0):
    """Poisson arrivals during active phases of an on/off cycle with a random phase offset."""
    period = profile.active_period_s + profile.idle_period_s
    offset = rng.uniform(0.0, period)
    out = []
    window = start_s - offset
    while window < end_s:
        t = window
        stop = window + profile.active_period_s
        while True:
            t += rng.exponential(profile.mean_interarrival_s)
            if t >= stop or t >= end_s:
                break
            if t >= start_s:
                out.append(t)
        window += period
    return np.array(out, dtype=float)


def generate_tasks(user: int, profile: ServiceProfile, t0: float, t1: float, schedule) -> np.ndarray:
    """Arrival times of ``user``'s tasks in ``[t0, t1)`` taken from a precomputed schedule."""
    times = schedule[user]
    return times[(times >= t0) & (times < t1)]


@dataclass
class TaskTable:
    """The full, policy-independent task stream of one run, sorted by (time, user)."""

    created_at: np.ndarray
    owner: np.ndarray
    service: np.ndarray
    length_mi: np.ndarray
    upload_kb: np.ndarray
    download_kb: np.ndarray
    duration_s: np.ndarray
    offloaded: np.ndarray

    def __len__(self) -> int:
        return len(self.created_at)


def build_task_table(service_idx: np.ndarray, cfg: ExperimentConfig, seed: int) -> TaskTable:
    profiles = [cfg.service(s) for s in SERVICE_ORDER]
    times, owners, svc, off = [], [], [], []
    for u, si in enumerate(service_idx):
        rng = substream(seed, "tasks", u)
        prof = profiles[si]
        t = arrival_times(prof, cfg.sim_duration_s, rng)
        times.append(t)
        owners.append(np.full(len(t), u))
        svc.append(np.full(len(t), si))
        off.append(rng.uniform(size=len(t)) < prof.cloud_offload_prob)
    if times:
        t = np.concatenate(times)
        o = np.concatenate(owners).astype(int)
        s = np.concatenate(svc).astype(int)
        f = np.concatenate(off).astype(bool)
    else:
        t, o, s, f = np.zeros(0), np.zeros(0, int), np.zeros(0, int), np.zeros(0, bool)
    order = np.lexsort((o, t))
    t, o, s, f = t[order], o[order], s[order], f[order]
    length = np.array([p.task_length_mi for p in profiles])[s]
    up = np.array([p.upload_kb for p in profiles])[s]
    down = np.array([p.download_kb for p in profiles])[s]
    cores = np.array([p.required_cores for p in profiles], dtype=float)[s]
    dur = length / cfg.vm_mips * cores
    return TaskTable(t, o, s, length, up, down, dur, f)


@dataclass
class World:
    cfg: ExperimentConfig
    seed: int
    clock: SimClock
    area: tuple
    user_pos: np.ndarray
    high: np.ndarray
    user_tech: np.ndarray
    service_idx: np.ndarray
    speed: np.ndarray
    heading: np.ndarray
    waypoint: np.ndarray
    dwell_until: np.ndarray
    dev_pos: np.ndarray
    dev_tech: np.ndarray
    ledger: CapacityLedger
    tasks: TaskTable
    state: np.ndarray
    device: np.ndarray
    finish_at: np.ndarray
    delay_ms: np.ndarray
    sub_center: np.ndarray
    sub_bound: np.ndarray
    by_subspace: np.ndarray
    running: np.ndarray
    next_task: int = 0
    user_device: Optional[np.ndarray] = None
    device_device: Optional[np.ndarray] = None
    lmap: Optional[LatencyMap] = None
    segmentation: Optional[Segmentation] = None
    counts: TaskLedger = field(default_factory=TaskLedger)
    churn_series: list = field(default_factory=list)
    nomad_series: list = field(default_factory=list)
    subspace_series: list = field(default_factory=list)
    resegmentations: int = 0

    @property
    def n_users(self) -> int:
        return len(self.user_pos)

    @property
    def segmented(self) -> bool:
        return self.cfg.policy != Policy.MONOLITHIC

    @property
    def map_pos(self) -> np.ndarray:
        if self.lmap is None:
            return np.full((self.n_users, 2), np.nan)
        return self.lmap.user_coords

    def snapshot(self) -> tuple:
        """Hashable summary of the mutable state, for determinism checks."""
        return (self.clock.ticks, self.user_pos.tobytes(), self.map_pos.tobytes(), self.state.tobytes(),
                self.device.tobytes(), self.ledger.free.tobytes(),
                None if self.segmentation is None else self.segmentation.assignment.tobytes())


def _choice(u: np.ndarray, shares) -> np.ndarray:
    cum = np.cumsum(shares)
    cum[-1] = 1.0
    return np.searchsorted(cum, u, side="right").clip(0, len(cum) - 1)


def init_world(cfg: ExperimentConfig, seed: Optional[int] = None) -> World:
    seed = cfg.rng_seed if seed is None else seed
    n, nd = cfg.n_users, cfg.n_devices
    area = (float(cfg.area_m[0]), float(cfg.area_m[1]))
    mob = cfg.mobility

    g = substream(seed, "devices.pos")
    dev_pos = g.uniform(size=(nd, 2)) * area
    dev_tech = _choice(substream(seed, "devices.tech").uniform(size=nd), cfg.population.device_tech_shares)

    user_pos = substream(seed, "users.pos").uniform(size=(n, 2)) * area
    high = substream(seed, "users.class").uniform(size=n) < mob.high_mobility_fraction
    user_tech = _choice(substream(seed, "users.tech").uniform(size=n), cfg.population.user_tech_shares)
    shares = [cfg.service(s).usage_share for s in SERVICE_ORDER]
    service_idx = _choice(substream(seed, "users.service").uniform(size=n), shares)
    u_speed = substream(seed, "users.speed").uniform(size=n)
    plo, phi = mob.pedestrian_speed_mps
    vlo, vhi = mob.vehicle_speed_mps
    speed = np.where(high, vlo + (vhi - vlo) * u_speed, plo + (phi - plo) * u_speed)
    heading = substream(seed, "users.heading").uniform(size=n) * 2 * np.pi
    waypoint = substream(seed, "users.waypoint").uniform(size=(n, 2)) * area
    dwell_until = np.zeros(n)

    tasks = build_task_table(service_idx, cfg, seed)
    m = len(tasks)
    world = World(
        cfg=cfg, seed=seed, clock=SimClock(cfg.tick_s, cfg.sim_duration_s, cfg.warmup_s), area=area,
        user_pos=user_pos, high=high, user_tech=user_tech, service_idx=service_idx, speed=speed, heading=heading,
        waypoint=waypoint, dwell_until=dwell_until, dev_pos=dev_pos, dev_tech=dev_tech,
        ledger=CapacityLedger(np.full(nd, cfg.vm_slots_total)), tasks=tasks,
        state=np.full(m, PENDING, dtype=np.int8), device=np.full(m, -1, dtype=int),
        finish_at=np.full(m, np.inf), delay_ms=np.full(m, np.nan), sub_center=np.full((m, 2), np.nan),
        sub_bound=np.full(m, np.nan), by_subspace=np.zeros(m, dtype=bool), running=np.zeros(0, dtype=int),
    )
    _measure(world, 0)
    if world.segmented:
        _localize(world)
        world.segmentation = build_segmentation(world.map_pos, high, world.lmap.anchor_coords, cfg, cfg.policy,
                                                cfg.clustering_mode, 0.0, seed)
    return world


def _measure(world: World, tick: int) -> None:
    cfg = world.cfg
    if world.device_device is None:
        world.device_device = device_block(world.dev_pos, world.dev_tech, cfg.latency,
                                           substream(world.seed, "jitter.devices"))
    world.user_device = latency_block(world.user_pos, world.user_tech, world.dev_pos, world.dev_tech, cfg.latency,
                                      substream(world.seed, "jitter.users", tick))


def _localize(world: World) -> None:
    cfg, loc = world.cfg, world.cfg.localization
    ceiling = cfg.latency.ceiling_ms
    prev = world.lmap
    if prev is None:
        emb = embed_devices(world.device_device, seed=world.seed, max_iter=loc.max_iter, tol=loc.tol,
                            n_init=loc.n_init, ceiling_ms=ceiling)
        anchors, stress = emb.coords, emb.stress
    else:
        anchors, stress = prev.anchor_coords, prev.stress_value
    coords, ok = place_users(world.user_device, anchors, ceiling_ms=ceiling, seed=world.seed,
                             max_iter=loc.user_max_iter, tol=loc.user_tol, restarts=loc.user_restarts)
    embedded_at = prev.embedded_at if prev is not None else world.clock.now_s
    world.lmap = LatencyMap(anchors, coords, stress, embedded_at, tuple(range(len(anchors))), ok)


def _move(world: World, tick: int, dt: float) -> None:
    cfg, mob = world.cfg, world.cfg.mobility
    n = world.n_users
    if n == 0:
        return
    now = world.clock.now_s - dt
    u = substream(world.seed, "mobility.pedestrian", tick).uniform(size=(4, n))
    z = substream(world.seed, "mobility.vehicle", tick).standard_normal(n)
    lo = ~world.high
    if lo.any():
        p, wp, sp, dw = pedestrian_arrays(world.user_pos[lo], world.waypoint[lo], world.speed[lo],
                                          world.dwell_until[lo], now, dt, world.area, u[0, lo], u[1, lo],
                                          u[2, lo], u[3, lo], mob.pedestrian_pause_s, mob.pedestrian_speed_mps)
        world.user_pos[lo], world.waypoint[lo], world.speed[lo], world.dwell_until[lo] = p, wp, sp, dw
    hi = world.high
    if hi.any():
        p, hd = vehicle_arrays(world.user_pos[hi], world.heading[hi], world.speed[hi], dt, world.area, z[hi],
                               mob.vehicle_heading_sd_rad)
        world.user_pos[hi], world.heading[hi] = p, hd


def _finish(world: World, ids: np.ndarray, state: int) -> None:
    for t in ids.tolist():
        world.ledger.release(t)
    world.state[ids] = state


def tick(world: World) -> World:
    """Advance the world by one tick (in place) and return it."""
    cfg = world.cfg
    dt = cfg.tick_s
    k = world.clock.ticks + 1
    now = world.clock.advance()
    after_warmup = now >= cfg.warmup_s
    ceiling = cfg.latency.ceiling_ms

    _move(world, k, dt)
    _measure(world, k)
    if world.segmented:
        _localize(world)
        seg, flag, churn = resegment_step(world.segmentation, world.map_pos, world.high,
                                          world.lmap.anchor_coords, cfg, cfg.policy, cfg.clustering_mode, now,
                                          world.seed + k)
        world.segmentation = seg
        if after_warmup:
            world.churn_series.append(churn)
            world.nomad_series.append(float((seg.assignment < 0).mean()) if world.n_users else 0.0)
            world.subspace_series.append(len(seg.subspaces))
            world.resegmentations += int(flag)

    run = world.running
    if run.size:
        users = world.tasks.owner[run]
        lost = mobility_failures(world.map_pos[users], world.sub_center[run], world.sub_bound[run],
                                 world.by_subspace[run], world.user_device[users, world.device[run]], ceiling)
        _finish(world, run[lost], FAILED_MOBILITY)
        world.counts.failed_mobility += int(lost.sum())
        run = run[~lost]
        done = world.finish_at[run] <= now + 1e-9
        _finish(world, run[done], COMPLETED)
        world.counts.completed += int(done.sum())
        run = run[~done]

    placed = _place_new(world, now)
    world.running = np.concatenate([run, placed]) if placed.size else run
    world.counts.in_flight = int(world.running.size)

    if not world.counts.balanced():
        raise SimulationError(f"task ledger out of balance at t={now}: {world.counts}")
    if world.ledger.busy != world.running.size:
        raise SimulationError(f"capacity ledger mismatch at t={now}: {world.ledger.busy} busy slots, "
                              f"{world.running.size} running tasks")
    return world


def _pool_index(world: World) -> tuple[list, np.ndarray]:
    """Pool per subspace plus, per user, which pool it draws from (-1: every device)."""
    seg = world.segmentation
    n = world.n_users
    if not world.segmented or seg is None or not seg.subspaces:
        return [], np.full(n, -1)
    pools = [np.array(s.devices, dtype=int) for s in seg.subspaces]
    which = seg.assignment.copy()
    nomad = np.flatnonzero(which < 0)
    if nomad.size:
        pos = world.map_pos[nomad]
        c = seg.centers
        d = (pos[:, 0:1] - c[None, :, 0]) ** 2 + (pos[:, 1:2] - c[None, :, 1]) ** 2
        ok = ~np.isnan(pos).any(axis=1)
        which[nomad] = np.where(ok, np.argmin(np.where(np.isnan(d), np.inf, d), axis=1), -1)
    return pools, which


def _place_new(world: World, now: float) -> np.ndarray:
    cfg, tt = world.cfg, world.tasks
    start = world.next_task
    stop = int(np.searchsorted(tt.created_at, now, side="left"))
    world.next_task = stop
    if stop <= start:
        return np.zeros(0, dtype=int)
    ids = np.arange(start, stop)
    edge = ids[~tt.offloaded[ids]]
    world.counts.generated += edge.size
    if edge.size == 0:
        return np.zeros(0, dtype=int)

    everything = np.arange(cfg.n_devices)
    pools, which = _pool_index(world)
    geo = cfg.placement_metric == PlacementMetric.GEOGRAPHIC
    seg = world.segmentation
    placed = []
    for t in edge.tolist():
        u = int(tt.owner[t])
        w = int(which[u])
        pool = pools[w] if w >= 0 else everything
        lat = world.user_device[u]
        key = np.hypot(*(world.dev_pos - world.user_pos[u]).T) if geo else None
        dec = place_task(t, pool, lat, world.ledger, key)
        if dec.device is None:
            world.state[t] = FAILED_CAPACITY
            world.counts.failed_capacity += 1
            continue
        d = world.delay_ms[t] = task_delay_ms(dec.est_latency_ms, tt.upload_kb[t], tt.download_kb[t],
                                              cfg.bandwidth_kbps)
        world.state[t] = RUNNING
        world.device[t] = dec.device
        world.finish_at[t] = now + tt.duration_s[t] + d / 1000.0
        if world.segmented and seg is not None and seg.assignment[u] >= 0:
            s = seg.subspaces[seg.assignment[u]]
            world.sub_center[t] = s.center
            world.sub_bound[t] = s.boundary
            world.by_subspace[t] = True
        placed.append(t)
    return np.array(placed, dtype=int)


def _report(world: World) -> MetricsReport:
    cfg, tt = world.cfg, world.tasks
    post = (tt.created_at >= cfg.warmup_s) & ~tt.offloaded & (tt.created_at < world.clock.now_s)
    st = world.state[post]
    gen = int(post.sum())
    comp = int((st == COMPLETED).sum())
    fm = int((st == FAILED_MOBILITY).sum())
    fc = int((st == FAILED_CAPACITY).sum())
    inflight = int((st == RUNNING).sum())
    delays = world.delay_ms[post][st == COMPLETED]
    empty = gen == 0
    nan = float("nan")
    seg = world.segmented
    return MetricsReport(
        policy=cfg.policy.value, clustering_mode=cfg.clustering_mode.value,
        placement_metric=cfg.placement_metric.value, n_users=world.n_users, seed=world.seed,
        generated=gen, completed=comp, failed_mobility=fm, failed_capacity=fc, in_flight=inflight,
        offloaded=int((tt.offloaded & (tt.created_at >= cfg.warmup_s)).sum()),
        mean_delay_ms=float(delays.mean()) if delays.size else 0.0,
        p50_delay_ms=float(np.percentile(delays, 50)) if delays.size else 0.0,
        p95_delay_ms=float(np.percentile(delays, 95)) if delays.size else 0.0,
        mobility_failure_rate=fm / gen if gen else 0.0,
        capacity_failure_rate=fc / gen if gen else 0.0,
        mean_churn_pct=100.0 * float(np.mean(world.churn_series)) if seg and world.churn_series else (0.0 if seg else nan),
        resegmentations=world.resegmentations,
        mean_nomad_fraction=float(np.mean(world.nomad_series)) if world.nomad_series else (0.0 if seg else nan),
        mean_subspaces=float(np.mean(world.subspace_series)) if world.subspace_series else (0.0 if seg else nan),
        map_stress=world.lmap.stress_value if world.lmap is not None else nan,
        empty=empty,
    )


def simulate(cfg: ExperimentConfig, seed: Optional[int] = None, on_tick=None) -> MetricsReport:
    """Run without re-validating ``cfg``; ``on_tick(world)`` is called after every tick."""
    world = init_world(cfg, seed)
    for _ in range(world.clock.n_ticks):
        tick(world)
        if on_tick is not None:
            on_tick(world)
    return _report(world)


def run(cfg: ExperimentConfig, seed: Optional[int] = None) -> MetricsReport:
    validate_config(cfg)
    if cfg.policy != Policy.MONOLITHIC and cfg.n_devices < 3:
        raise SimulationError("segmented policies need at least 3 edge devices to build a latency map")
    try:
        return simulate(cfg, seed)
    except SimulationError:
        raise
    except Exception as exc:
        raise SimulationError(f"{type(exc).__name__}: {exc}") from exc


def world_at(cfg: ExperimentConfig, seed: Optional[int] = None, at_s: Optional[float] = None) -> World:
    """World state after the tick that reaches ``at_s`` (default: end of run).

    Monolithic worlds carry no latency map while running; one is built here
    so the map can still be inspected.
    """
    validate_config(cfg)
    world = init_world(cfg, seed)
    end = cfg.sim_duration_s if at_s is None else min(float(at_s), cfg.sim_duration_s)
    while world.clock.now_s < end - 1e-9 and world.clock.ticks < world.clock.n_ticks:
        tick(world)
    if world.lmap is None and cfg.n_devices >= 3:
        _localize(world)
    return world
