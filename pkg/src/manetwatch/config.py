"""Scenario configuration: YAML schema, strict loading, per-episode realisation.

Top-level keys (all optional except where noted)::

    N: 8                      # nodes
    area: [600, 600]          # metres
    mobility: {mean_speed: 2.0, memory: 0.8, sigma_s: 0.5, sigma_h: 0.3}
    comm_radius: 250
    flows: {count: 2, rate: 0.3}        # or a list of {source, destination, rate}
    T_max: 500
    jammers: []               # see JammerSpec
    seed: 0
    routing: {k_max: 8, ttl_factor: 4, dpd_capacity: 4096, max_retries: 0,
              beta_q: 0.3, beta_c: 0.2, gamma_q: 0.95, weights: [1.0, 0.2, 1.0, 5.0]}
    randomize: {speed: [0.5, 1.5], area: [0.8, 1.2], rate: [0.5, 1.5]}
    anomaly: {kind: none}     # jammer | size_shift | mobility_shift | traffic_shift
    ppo: {...}                # PpoHyperparams fields plus iterations, episodes_per_iter
    detector: {k: 5, alpha: 0.05, h: 10.0, window: 1}

Unknown keys anywhere raise ``ConfigError``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .cq import CqParams, RewardWeights
from .netsim import ChannelModel, JammerConfig, MobilityParams, TrafficFlow


class ConfigError(ValueError):
    pass


def _strict(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class MobilitySpec:
    mean_speed: float = 2.0
    memory: float = 0.8
    sigma_s: float = 0.5
    sigma_h: float = 0.3


@dataclass
class FlowSpec:
    count: int = 2
    rate: float = 0.3
    explicit: Optional[list] = None  # [{source, destination, rate}, ...]


@dataclass
class JammerSpec:
    jam_radius: float = 60.0
    window: tuple = (100, 400)
    mode: str = "SUPPRESS_ACK"
    position: Optional[tuple] = None
    follow_node: Optional[int] = None
    follow_flow: Optional[int] = None  # sit on this flow's source

    def __post_init__(self):
        anchors = [self.position is not None, self.follow_node is not None, self.follow_flow is not None]
        if sum(anchors) != 1:
            raise ValueError("a jammer needs exactly one of position / follow_node / follow_flow")
        self.window = tuple(self.window)


@dataclass
class RoutingSpec:
    k_max: int = 8
    ttl_factor: int = 4
    dpd_capacity: int = 4096
    max_retries: int = 0  # re-sends of an un-ACKed copy before the sender drops it
    beta_q: float = 0.3
    beta_c: float = 0.2
    gamma_q: float = 0.95
    weights: tuple = (1.0, 0.2, 1.0, 5.0)

    def reward_weights(self) -> RewardWeights:
        return RewardWeights(*self.weights)

    def cq_params(self) -> CqParams:
        return CqParams(self.beta_q, self.beta_c, self.gamma_q)


@dataclass
class RandomizeSpec:
    """Multiplier ranges drawn per training episode."""

    speed: tuple = (0.5, 1.5)
    area: tuple = (0.8, 1.2)
    rate: tuple = (0.5, 1.5)


@dataclass
class AnomalySpec:
    kind: str = "none"
    jammers: list = field(default_factory=list)
    N: Optional[int] = None
    multiplier: Optional[float] = None

    KINDS = ("none", "jammer", "size_shift", "mobility_shift", "traffic_shift")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"anomaly kind must be one of {self.KINDS}")
        if self.kind == "jammer" and not self.jammers:
            raise ValueError("jammer anomaly needs at least one jammer")
        if self.kind != "jammer" and self.jammers:
            raise ValueError("jammers listed under a non-jammer anomaly")
        if self.kind == "size_shift" and (self.N is None or self.N < 2):
            raise ValueError("size_shift needs N >= 2")
        if self.kind in ("mobility_shift", "traffic_shift") and (self.multiplier is None or self.multiplier <= 0):
            raise ValueError(f"{self.kind} needs a positive multiplier")
        self.jammers = [j if isinstance(j, JammerSpec) else _strict(JammerSpec, j, "anomaly.jammers")
                        for j in self.jammers]


@dataclass
class DetectorSpec:
    k: int = 5
    alpha: float = 0.05
    h: float = 10.0
    window: int = 1
    p_floor: Optional[float] = None


@dataclass
class PpoSpec:
    gamma: float = 0.99
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 256
    lr_actor: float = 3e-4
    lr_critic: float = 1e-3
    entropy_coef: float = 0.01
    hidden: tuple = (64, 64)
    iterations: int = 50
    episodes_per_iter: int = 2


@dataclass
class ScenarioConfig:
    N: int = 8
    area: tuple = (600.0, 600.0)
    mobility: MobilitySpec = field(default_factory=MobilitySpec)
    comm_radius: float = 250.0
    flows: FlowSpec = field(default_factory=FlowSpec)
    T_max: int = 500
    jammers: list = field(default_factory=list)
    seed: int = 0
    routing: RoutingSpec = field(default_factory=RoutingSpec)
    randomize: RandomizeSpec = field(default_factory=RandomizeSpec)
    anomaly: AnomalySpec = field(default_factory=AnomalySpec)
    ppo: PpoSpec = field(default_factory=PpoSpec)
    detector: DetectorSpec = field(default_factory=DetectorSpec)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        data = copy.deepcopy(data)
        nested = {"mobility": MobilitySpec, "flows": FlowSpec, "routing": RoutingSpec,
                  "randomize": RandomizeSpec, "anomaly": AnomalySpec, "ppo": PpoSpec,
                  "detector": DetectorSpec}
        for key, sub in nested.items():
            if key in data:
                data[key] = _strict(sub, data[key], key)
        if "jammers" in data:
            data["jammers"] = [_strict(JammerSpec, j, "jammers") for j in data["jammers"] or []]
        cfg = _strict(cls, data, "config")
        cfg.validate()
        return cfg

    def validate(self):
        if self.N < 2:
            raise ConfigError("N must be >= 2")
        if self.T_max < 1:
            raise ConfigError("T_max must be >= 1")
        if len(self.area) != 2 or min(self.area) <= 0:
            raise ConfigError("area must be two positive numbers")
        if self.comm_radius <= 0:
            raise ConfigError("comm_radius must be positive")
        if self.flows.explicit is None and not 0 < self.flows.rate <= 1:
            raise ConfigError("flow rate must lie in (0, 1]")
        if self.routing.max_retries < 0 or self.routing.ttl_factor < 1:
            raise ConfigError("routing.max_retries must be >= 0 and ttl_factor >= 1")
        if not 0 <= self.mobility.memory <= 1:
            raise ConfigError("mobility memory must lie in [0, 1]")

    @property
    def nominal(self) -> bool:
        return self.anomaly.kind == "none" and not self.jammers

    def with_anomaly(self, anomaly: Optional[AnomalySpec]) -> "ScenarioConfig":
        cfg = copy.deepcopy(self)
        cfg.anomaly = anomaly or AnomalySpec()
        return cfg


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return ScenarioConfig.from_dict(data or {})


@dataclass
class EpisodeSpec:
    """One concrete episode: sizes, flows and jammers fixed, ready to simulate."""

    n_nodes: int
    mobility: MobilityParams
    channel: ChannelModel
    flows: list
    T_max: int
    ttl: int
    k_max: int
    dpd_capacity: int
    max_retries: int
    cq: CqParams
    weights: RewardWeights


def realize(cfg: ScenarioConfig, rng: np.random.Generator, randomize: bool = False) -> EpisodeSpec:
    """Apply the anomaly block (and training randomisation) and draw flows."""
    n = cfg.N
    speed_mult = area_mult = rate_mult = 1.0
    if randomize:
        speed_mult = rng.uniform(*cfg.randomize.speed)
        area_mult = rng.uniform(*cfg.randomize.area)
        rate_mult = rng.uniform(*cfg.randomize.rate)
    a = cfg.anomaly
    if a.kind == "size_shift":
        n = a.N
    elif a.kind == "mobility_shift":
        speed_mult *= a.multiplier
    elif a.kind == "traffic_shift":
        rate_mult *= a.multiplier

    mob = MobilityParams(
        mean_speed=cfg.mobility.mean_speed * speed_mult,
        memory=cfg.mobility.memory,
        sigma_speed=cfg.mobility.sigma_s * speed_mult,
        sigma_heading=cfg.mobility.sigma_h,
        width=cfg.area[0] * area_mult,
        height=cfg.area[1] * area_mult,
    )

    flows = []
    if cfg.flows.explicit is not None:
        for i, f in enumerate(cfg.flows.explicit):
            flows.append(TrafficFlow(i, int(f["source"]), int(f["destination"]),
                                     min(1.0, float(f["rate"]) * rate_mult)))
    else:
        for i in range(cfg.flows.count):
            src, dst = rng.choice(n, size=2, replace=False)
            flows.append(TrafficFlow(i, int(src), int(dst), min(1.0, cfg.flows.rate * rate_mult)))

    jam_specs = list(cfg.jammers) + (list(a.jammers) if a.kind == "jammer" else [])
    jammers = []
    for js in jam_specs:
        follow = js.follow_node
        if js.follow_flow is not None:
            follow = flows[js.follow_flow].source
        jammers.append(JammerConfig(position=js.position or (0.0, 0.0), jam_radius=js.jam_radius,
                                    active_window=js.window, mode=js.mode, follow_node=follow))
    r = cfg.routing
    return EpisodeSpec(
        n_nodes=n,
        mobility=mob,
        channel=ChannelModel(cfg.comm_radius, jammers),
        flows=flows,
        T_max=cfg.T_max,
        ttl=r.ttl_factor * n,
        k_max=r.k_max,
        dpd_capacity=r.dpd_capacity,
        max_retries=r.max_retries,
        cq=r.cq_params(),
        weights=r.reward_weights(),
    )
