"""Domain types, the default service catalog and the experiment configuration.

Everything here is a plain value type. The simulation engine keeps its hot
state in numpy arrays, but these dataclasses are what the public operations
accept and return.
"""

from __future__ import annotations

import dataclasses
import enum
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml


class MobilityClass(str, enum.Enum):
    LOW = "LowMobility"
    HIGH = "HighMobility"


class CommTech(str, enum.Enum):
    WIFI = "WiFi"
    CELLULAR_5G = "Cellular5G"
    BLUETOOTH = "Bluetooth"


# row/column order of LatencyParams.tech_base_ms
TECH_ORDER = (CommTech.WIFI, CommTech.CELLULAR_5G, CommTech.BLUETOOTH)
TECH_INDEX = {t: i for i, t in enumerate(TECH_ORDER)}


class ServiceType(str, enum.Enum):
    AR = "AR"
    EHEALTH = "EHealth"
    GAMING = "Gaming"
    INFOTAINMENT = "Infotainment"


class Policy(str, enum.Enum):
    MONOLITHIC = "Monolithic"
    SINGLE_LAYER = "SingleLayer"
    DUAL_LAYER = "DualLayer"


class ClusteringMode(str, enum.Enum):
    LAX = "Lax"
    STRICT = "Strict"


class PlacementMetric(str, enum.Enum):
    LATENCY = "latency"
    GEOGRAPHIC = "geographic"


class TaskState(str, enum.Enum):
    PENDING = "Pending"
    RUNNING = "Running"
    COMPLETED = "Completed"
    FAILED_MOBILITY = "FailedMobility"
    FAILED_CAPACITY = "FailedCapacity"


_TRANSITIONS = {
    TaskState.PENDING: {TaskState.RUNNING, TaskState.FAILED_CAPACITY},
    TaskState.RUNNING: {TaskState.COMPLETED, TaskState.FAILED_MOBILITY},
}


class InvalidConfig(ValueError):
    """Raised by :func:`validate_config`; ``errors`` holds ``(path, message)`` pairs."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{p}: {m}" for p, m in errors))


@dataclass
class EndUser:
    id: int
    physical_pos: tuple[float, float]
    speed: float
    heading: float
    mobility_class: MobilityClass
    comm_tech: CommTech
    service: ServiceType
    map_pos: Optional[tuple[float, float]] = None
    subspace: Optional[int] = None

    @property
    def nomadic(self) -> bool:
        return self.subspace is None


@dataclass
class EdgeDevice:
    id: int
    physical_pos: tuple[float, float]
    vm_slots_total: int
    vm_slots_free: int
    vm_mips: float
    comm_tech: CommTech
    map_pos: Optional[tuple[float, float]] = None


@dataclass(frozen=True)
class ServiceProfile:
    id: ServiceType
    usage_share: float
    active_period_s: float
    idle_period_s: float
    mean_interarrival_s: float
    upload_kb: float
    download_kb: float
    task_length_mi: float
    required_cores: int
    vm_utilization_pct: float
    delay_sensitivity: float
    cloud_offload_prob: float
    max_delay_ms: float

    def problems(self) -> list[tuple[str, str]]:
        out = []
        for f in dataclasses.fields(self):
            if f.name == "id":
                continue
            v = getattr(self, f.name)
            if f.name in ("delay_sensitivity", "cloud_offload_prob"):
                if not 0.0 <= v <= 1.0:
                    out.append((f.name, f"must lie in [0, 1], got {v}"))
            elif not v > 0:
                out.append((f.name, f"must be > 0, got {v}"))
        return out


@dataclass
class Task:
    id: int
    owner: int
    service: ServiceType
    created_at: float
    length_mi: float
    upload_kb: float
    download_kb: float
    state: TaskState = TaskState.PENDING
    assigned_device: Optional[int] = None
    finish_at: Optional[float] = None

    def advance(self, new_state: TaskState) -> None:
        if new_state not in _TRANSITIONS.get(self.state, ()):
            raise ValueError(f"illegal task transition {self.state.value} -> {new_state.value}")
        self.state = new_state


def default_service_catalog() -> list[ServiceProfile]:
    """The four built-in service profiles.

    AR is the most delay-critical (tightest deadline), E-health
    sends tiny payloads, Gaming is CPU heavy and Infotainment is download heavy
    but delay tolerant. The constants are simulator parameters and every one
    of them can be overridden from the config file.
    """
    S = ServiceType
    return [
        ServiceProfile(S.AR, 0.30, 40.0, 20.0, 8.0, 500.0, 250.0, 20000.0, 1, 25.0, 0.9, 0.0, 40.0),
        ServiceProfile(S.EHEALTH, 0.20, 60.0, 30.0, 12.0, 40.0, 20.0, 15000.0, 1, 10.0, 0.7, 0.0, 150.0),
        ServiceProfile(S.GAMING, 0.25, 30.0, 30.0, 10.0, 100.0, 200.0, 20000.0, 2, 40.0, 0.8, 0.0, 80.0),
        ServiceProfile(S.INFOTAINMENT, 0.25, 45.0, 45.0, 16.0, 20.0, 1500.0, 15000.0, 1, 15.0, 0.2, 0.0, 400.0),
    ]


# ---------------------------------------------------------------------------
# experiment configuration


@dataclass
class KMeansParams:
    target_cluster_size: int = 35
    outlier_radius: float = 30.0
    max_iter: int = 100
    n_init: int = 8


@dataclass
class RadialParams:
    radius: float = 11.0
    padding_fraction: float = 0.25
    min_members: int = 3


@dataclass
class LatencyParams:
    # rows/cols: WiFi, Cellular5G, Bluetooth
    tech_base_ms: list[list[float]] = field(
        default_factory=lambda: [[2.0, 6.0, 4.0], [6.0, 4.0, 8.0], [4.0, 8.0, 3.0]]
    )
    per_meter_ms: float = 0.05
    jitter_sd_ms: float = 0.5
    ceiling_ms: float = 500.0
    bluetooth_range_m: float = 150.0


@dataclass
class LocalizationParams:
    max_iter: int = 300
    tol: float = 1e-9
    n_init: int = 4
    user_max_iter: int = 50
    user_tol: float = 1e-6
    user_restarts: int = 0


@dataclass
class MobilityParams:
    high_mobility_fraction: float = 0.65
    pedestrian_speed_mps: list[float] = field(default_factory=lambda: [0.0, 2.0])
    pedestrian_pause_s: list[float] = field(default_factory=lambda: [0.0, 30.0])
    vehicle_speed_mps: list[float] = field(default_factory=lambda: [8.0, 20.0])
    vehicle_heading_sd_rad: float = 0.2


@dataclass
class PopulationParams:
    # user tech mix, order WiFi, Cellular5G, Bluetooth
    user_tech_shares: list[float] = field(default_factory=lambda: [0.45, 0.45, 0.10])
    device_tech_shares: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.0])


@dataclass
class ExperimentConfig:
    area_m: list[float] = field(default_factory=lambda: [1000.0, 1000.0])
    n_devices: int = 30
    vm_slots_total: int = 4
    vm_mips: float = 4000.0
    bandwidth_kbps: float = 10000.0
    device_counts_sweep: list[int] = field(default_factory=lambda: [100, 200, 300, 400, 500, 600])
    n_users: int = 100
    n_repetitions: int = 25
    sim_duration_s: float = 600.0
    warmup_s: float = 60.0
    tick_s: float = 1.0
    rng_seed: int = 1
    speed_threshold_mps: float = 3.0
    policy: Policy = Policy.DUAL_LAYER
    clustering_mode: ClusteringMode = ClusteringMode.LAX
    placement_metric: PlacementMetric = PlacementMetric.LATENCY
    churn_threshold: float = 0.3
    kmeans: KMeansParams = field(default_factory=KMeansParams)
    radial: RadialParams = field(default_factory=RadialParams)
    latency: LatencyParams = field(default_factory=LatencyParams)
    localization: LocalizationParams = field(default_factory=LocalizationParams)
    mobility: MobilityParams = field(default_factory=MobilityParams)
    population: PopulationParams = field(default_factory=PopulationParams)
    services: list[ServiceProfile] = field(default_factory=default_service_catalog)

    def service(self, sid: ServiceType) -> ServiceProfile:
        for p in self.services:
            if p.id == sid:
                return p
        raise KeyError(sid)


def _check_config(cfg: ExperimentConfig) -> list[tuple[str, str]]:
    errs: list[tuple[str, str]] = []

    def need(cond: bool, path: str, msg: str) -> None:
        if not cond:
            errs.append((path, msg))

    def finite(v: Any) -> bool:
        return isinstance(v, (int, float)) and math.isfinite(v)

    need(len(cfg.area_m) == 2 and all(finite(v) and v > 0 for v in cfg.area_m), "area_m", "two positive extents required")
    for name in ("n_devices", "vm_slots_total", "n_users", "n_repetitions"):
        need(getattr(cfg, name) >= 1, name, "must be >= 1")
    need(cfg.vm_mips > 0, "vm_mips", "must be > 0")
    need(cfg.bandwidth_kbps > 0, "bandwidth_kbps", "must be > 0")
    need(len(cfg.device_counts_sweep) >= 1 and all(c >= 1 for c in cfg.device_counts_sweep),
         "device_counts_sweep", "non-empty list of counts >= 1 required")
    need(cfg.tick_s > 0, "tick_s", "must be > 0")
    need(cfg.sim_duration_s > 0, "sim_duration_s", "must be > 0")
    need(0 <= cfg.warmup_s < cfg.sim_duration_s, "warmup_s", "must satisfy 0 <= warmup_s < sim_duration_s")
    need(cfg.speed_threshold_mps >= 0, "speed_threshold_mps", "must be >= 0")
    need(cfg.churn_threshold >= 0, "churn_threshold", "must be >= 0")

    km, rd = cfg.kmeans, cfg.radial
    need(km.target_cluster_size >= 1, "kmeans.target_cluster_size", "must be >= 1")
    need(km.outlier_radius > 0, "kmeans.outlier_radius", "must be > 0")
    need(km.max_iter >= 1, "kmeans.max_iter", "must be >= 1")
    need(km.n_init >= 1, "kmeans.n_init", "must be >= 1")
    need(rd.radius > 0, "radial.radius", "must be > 0")
    need(rd.padding_fraction >= 0, "radial.padding_fraction", "must be >= 0")
    need(rd.min_members >= 1, "radial.min_members", "must be >= 1")

    lat = cfg.latency
    tb = lat.tech_base_ms
    shape_ok = len(tb) == 3 and all(len(r) == 3 for r in tb)
    need(shape_ok, "latency.tech_base_ms", "must be a 3x3 table")
    if shape_ok:
        need(all(v >= 0 for r in tb for v in r), "latency.tech_base_ms", "entries must be >= 0")
        need(all(tb[i][j] == tb[j][i] for i in range(3) for j in range(3)), "latency.tech_base_ms", "must be symmetric")
    for name in ("per_meter_ms", "jitter_sd_ms", "bluetooth_range_m"):
        need(getattr(lat, name) >= 0, f"latency.{name}", "must be >= 0")
    need(lat.ceiling_ms > 0, "latency.ceiling_ms", "must be > 0")

    loc = cfg.localization
    for name in ("max_iter", "n_init", "user_max_iter"):
        need(getattr(loc, name) >= 1, f"localization.{name}", "must be >= 1")
    need(loc.tol >= 0 and loc.user_tol >= 0, "localization.tol", "tolerances must be >= 0")
    need(loc.user_restarts >= 0, "localization.user_restarts", "must be >= 0")

    mob = cfg.mobility
    need(0 <= mob.high_mobility_fraction <= 1, "mobility.high_mobility_fraction", "must lie in [0, 1]")
    for name in ("pedestrian_speed_mps", "pedestrian_pause_s", "vehicle_speed_mps"):
        lo_hi = getattr(mob, name)
        need(len(lo_hi) == 2 and 0 <= lo_hi[0] <= lo_hi[1], f"mobility.{name}", "must be [min, max] with 0 <= min <= max")
    need(mob.vehicle_heading_sd_rad >= 0, "mobility.vehicle_heading_sd_rad", "must be >= 0")

    for name in ("user_tech_shares", "device_tech_shares"):
        sh = getattr(cfg.population, name)
        need(len(sh) == 3 and all(v >= 0 for v in sh) and abs(sum(sh) - 1) < 1e-9,
             f"population.{name}", "three non-negative shares summing to 1 required")

    ids = [p.id for p in cfg.services]
    need(sorted(i.value for i in ids) == sorted(s.value for s in ServiceType), "services",
         "exactly one profile per service type required")
    for p in cfg.services:
        for fname, msg in p.problems():
            errs.append((f"services.{p.id.value}.{fname}", msg))
    if cfg.services:
        need(abs(sum(p.usage_share for p in cfg.services) - 1) < 1e-9, "services", "usage_share must sum to 1")
    return errs


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Return ``cfg`` unchanged, or raise :class:`InvalidConfig` listing every violation."""
    errs = _check_config(cfg)
    if errs:
        raise InvalidConfig(errs)
    return cfg


# ---------------------------------------------------------------------------
# config (de)serialization


def config_to_dict(cfg: Any) -> Any:
    if dataclasses.is_dataclass(cfg):
        return {f.name: config_to_dict(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}
    if isinstance(cfg, enum.Enum):
        return cfg.value
    if isinstance(cfg, (list, tuple)):
        return [config_to_dict(v) for v in cfg]
    return cfg


def _coerce(tp: Any, value: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise InvalidConfig([(path, "expected a mapping")])
        return _from_dict(tp, value, path)
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(value)
        except ValueError:
            raise InvalidConfig([(path, f"unknown value {value!r}; expected one of {[m.value for m in tp]}")])
    if origin is list:
        (inner,) = typing.get_args(tp)
        if not isinstance(value, list):
            raise InvalidConfig([(path, "expected a list")])
        return [_coerce(inner, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is float:
        if isinstance(value, str):  # YAML 1.1 reads "1e-5" as a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidConfig([(path, f"expected a number, got {value!r}")])
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidConfig([(path, f"expected an integer, got {value!r}")])
        return value
    return value


def _from_dict(cls: Any, data: dict, prefix: str = "") -> Any:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise InvalidConfig([(f"{prefix}{k}", "unknown field") for k in unknown])
    kwargs = {k: _coerce(hints[k], v, f"{prefix}{k}") for k, v in data.items()}
    if cls is ServiceProfile:
        missing = names - set(kwargs)
        if missing:
            raise InvalidConfig([(f"{prefix}{k}", "missing field") for k in sorted(missing)])
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, data or {})


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical YAML text: field order as declared, block style."""
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=None)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    data = config_to_dict(ExperimentConfig())
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        _merge(data, loaded)
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise InvalidConfig([(item, "override must look like path=value")])
        set_by_path(data, key.strip(), yaml.safe_load(raw))
    return config_from_dict(data)


def _merge(base: dict, upd: dict) -> None:
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v


def set_by_path(data: dict, path: str, value: Any) -> None:
    """Set ``a.b.c`` inside nested dicts; list elements are addressed by index."""
    parts = path.split(".")
    node: Any = data
    for p in parts[:-1]:
        node = node[int(p)] if isinstance(node, list) else node.setdefault(p, {})
    last = parts[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value
