"""
Scenario configuration - parsing, validation and emission of scenario documents

A scenario document is line-oriented::

    # two-proxy tandem, P2 slows down at t=30
    topology.proxies = 2
    server.p2.mu = 400
    workload.slowdown = p2:30:90:0.5
    run.duration = 45
    run.seed = 7

Keys are dotted section paths. Values are validated with pydantic models that
forbid unknown keys; every failure surfaces as a ``ConfigError`` naming the key.
"""

import math
import os
from typing import Any, Dict, List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, SerializeAsAny, ValidationError, field_validator, model_validator

from .controllers import CONTROLLERS, NoParams, _Params
from .errors import ConfigError

load_dotenv()

DEFAULT_OUTPUT_DIR = os.getenv("SIPSIM_OUTPUT_DIR", "out")

NODE_IDS = ("p1", "p2", "uas", "uas-alt", "cluster")
REQUIRED_KEYS = ("topology.proxies", "run.duration", "run.seed")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def _fields(value: Any, names: Tuple[str, ...]) -> Any:
    if isinstance(value, str):
        parts = value.split(":")
        if len(parts) != len(names):
            raise ValueError(f"expected {':'.join(names)}, got {value!r}")
        return dict(zip(names, parts))
    return value


class TopologyConfig(_Section):
    uacs: int = Field(1, ge=1)
    proxies: int = Field(ge=1, le=2)
    cluster: int = Field(0, ge=0)
    alternate: bool = False

    @model_validator(mode="after")
    def _cluster_or_alternate(self):
        if self.cluster and self.alternate:
            raise ValueError("an alternate destination cannot be combined with a cluster")
        return self


class NodeOverride(_Section):
    mu: Optional[float] = Field(None, gt=0)
    buffer: Optional[int] = Field(None, ge=0)

    @field_validator("buffer", mode="before")
    @classmethod
    def _unlimited(cls, value):
        return None if value == "unlimited" else value


class ServerConfig(_Section):
    mu: float = Field(500.0, gt=0)
    buffer: Optional[int] = Field(None, ge=0)
    service: Literal["exponential", "deterministic"] = "exponential"
    reject_cost: float = Field(0.5, ge=0, le=1)
    retry_after: Optional[float] = Field(None, gt=0)
    occupancy_window: float = Field(1.0, gt=0)
    nodes: Dict[str, NodeOverride] = Field(default_factory=dict)

    @model_validator(mode="before")
    @classmethod
    def _collect_nodes(cls, data):
        if not isinstance(data, dict):
            return data
        data = dict(data)
        nodes = dict(data.pop("nodes", {}) or {})
        for key in list(data):
            if key in NODE_IDS:
                nodes[key] = data.pop(key)
        data["nodes"] = nodes
        return data

    @field_validator("buffer", mode="before")
    @classmethod
    def _unlimited(cls, value):
        return None if value == "unlimited" else value

    @field_validator("nodes")
    @classmethod
    def _known_nodes(cls, value):
        for node in value:
            if node not in NODE_IDS:
                raise ValueError(f"unknown node {node!r}")
        return value

    def mu_for(self, node: str) -> Optional[float]:
        override = self.nodes.get(node)
        if override is not None and override.mu is not None:
            return override.mu
        # user agents are endpoints with unlimited capacity unless configured
        if node in ("uas", "uas-alt"):
            return None
        return self.mu

    def buffer_for(self, node: str) -> Optional[int]:
        override = self.nodes.get(node)
        if override is not None and override.buffer is not None:
            return override.buffer
        return self.buffer


class TimersConfig(_Section):
    t1: float = Field(0.5, gt=0)
    t2: float = Field(4.0, gt=0)

    @model_validator(mode="after")
    def _ordered(self):
        if self.t2 < self.t1:
            raise ValueError("t2 must not be smaller than t1")
        return self


class LinkConfig(_Section):
    loss: float = Field(0.08, ge=0, le=1)
    delay: float = Field(0.0, ge=0)


class CallConfig(_Section):
    teardown: bool = True
    hold: float = Field(0.0, ge=0)
    setup_timeout: Optional[float] = Field(None, gt=0)


class Segment(_Section):
    start: float = Field(ge=0)
    end: float
    rate: float = Field(ge=0)

    @model_validator(mode="before")
    @classmethod
    def _from_text(cls, value):
        return _fields(value, ("start", "end", "rate"))

    @model_validator(mode="after")
    def _ordered(self):
        if self.end <= self.start:
            raise ValueError(f"segment end {self.end} must follow start {self.start}")
        return self

    def __str__(self) -> str:
        return f"{self.start!r}:{self.end!r}:{self.rate!r}"


class Slowdown(_Section):
    node: str
    start: float = Field(ge=0)
    end: float
    multiplier: float = Field(gt=0)

    @model_validator(mode="before")
    @classmethod
    def _from_text(cls, value):
        return _fields(value, ("node", "start", "end", "multiplier"))

    @model_validator(mode="after")
    def _ordered(self):
        if self.end <= self.start:
            raise ValueError(f"slowdown end {self.end} must follow start {self.start}")
        return self

    def __str__(self) -> str:
        return f"{self.node}:{self.start!r}:{self.end!r}:{self.multiplier!r}"


class WorkloadConfig(_Section):
    rate: Optional[float] = Field(None, ge=0)
    segments: List[Segment] = Field(default_factory=list)
    process: Literal["poisson", "deterministic"] = "poisson"
    slowdown: List[Slowdown] = Field(default_factory=list)

    @field_validator("segments", "slowdown", mode="before")
    @classmethod
    def _lists(cls, value):
        return _split_list(value)

    @model_validator(mode="after")
    def _non_overlapping(self):
        for previous, current in zip(self.segments, self.segments[1:]):
            if current.start < previous.end:
                raise ValueError("segments must be ordered and non-overlapping")
        return self


class ControllerConfig(_Section):
    name: str = "none"
    params: SerializeAsAny[_Params] = Field(default_factory=NoParams)


class BalancerConfig(_Section):
    name: Literal["cjsq", "tjsq", "tlwl"] = "cjsq"
    invite_cost: float = Field(2.0, gt=0)
    bye_cost: float = Field(1.0, gt=0)


class FluidConfig(_Section):
    enabled: bool = False
    dt: float = Field(0.005, gt=0)
    include_redundant_responses: bool = True


class RunConfig(_Section):
    duration: float = Field(gt=0)
    seed: int = Field(ge=0, lt=2 ** 64)
    sample_interval: float = Field(0.1, gt=0)
    control_tick: Optional[float] = Field(None, gt=0)
    warmup: Optional[float] = Field(None, ge=0)
    out: str = DEFAULT_OUTPUT_DIR


class ScenarioConfig(_Section):
    topology: TopologyConfig
    server: ServerConfig = Field(default_factory=ServerConfig)
    timers: TimersConfig = Field(default_factory=TimersConfig)
    link: LinkConfig = Field(default_factory=LinkConfig)
    call: CallConfig = Field(default_factory=CallConfig)
    workload: WorkloadConfig = Field(default_factory=WorkloadConfig)
    controller: ControllerConfig = Field(default_factory=ControllerConfig)
    balancer: BalancerConfig = Field(default_factory=BalancerConfig)
    fluid: FluidConfig = Field(default_factory=FluidConfig)
    run: RunConfig

    @model_validator(mode="before")
    @classmethod
    def _resolve_defaults(cls, data):
        """Fill defaults that depend on other sections so emitted documents are explicit"""
        if not isinstance(data, dict):
            return data
        data = {key: (dict(value) if isinstance(value, dict) else value) for key, value in data.items()}
        try:
            t1 = float((data.get("timers") or {}).get("t1", 0.5))
        except (AttributeError, TypeError, ValueError):
            # the timers section reports its own error
            t1 = 0.5
        run = data.get("run")
        if isinstance(run, dict):
            run.setdefault("control_tick", t1)
            if "duration" in run and "warmup" not in run:
                try:
                    run["warmup"] = float(run["duration"]) / 2
                except (TypeError, ValueError):
                    pass
        call = data.setdefault("call", {})
        if isinstance(call, dict):
            call.setdefault("setup_timeout", 64 * t1)
        workload = data.setdefault("workload", {})
        if isinstance(workload, dict) and not workload.get("segments") and isinstance(run, dict) and "duration" in run:
            rate = workload.get("rate", 10.0)
            workload["rate"] = rate
            workload["segments"] = [{"start": 0.0, "end": run["duration"], "rate": rate}]
        return data

    @model_validator(mode="after")
    def _cross_checks(self):
        nodes = set(self.node_ids)
        for slowdown in self.workload.slowdown:
            target = slowdown.node
            if target not in nodes and not (target == "cluster" and self.topology.cluster):
                raise ValueError(f"workload.slowdown names unknown node {target!r}")
        for node in self.server.nodes:
            if node not in nodes and not (node == "cluster" and self.topology.cluster):
                raise ValueError(f"server.{node} names a node the topology does not have")
        if self.workload.segments and self.workload.segments[-1].end > self.run.duration + 1e-9:
            raise ValueError("workload.segments extend beyond run.duration")
        if self.run.warmup is not None and self.run.warmup >= self.run.duration:
            raise ValueError("run.warmup must be shorter than run.duration")
        if self.fluid.enabled and self.topology.proxies != 2:
            raise ValueError("fluid.enabled needs a two-proxy tandem")
        if self.fluid.dt > self.timers.t1 / 10:
            raise ValueError("fluid.dt must not exceed timers.t1 / 10")
        return self

    @property
    def node_ids(self) -> List[str]:
        ids = [f"uac{i + 1}" for i in range(self.topology.uacs)]
        ids += [f"p{i + 1}" for i in range(self.topology.proxies)]
        if self.topology.cluster:
            ids += [f"c{i + 1}" for i in range(self.topology.cluster)]
        else:
            ids.append("uas")
        if self.topology.alternate:
            ids.append("uas-alt")
        return ids

    def workload_signature(self) -> Dict[str, Any]:
        """Everything but controller and balancer; comparison rows must agree on it"""
        return self.model_dump(exclude={"controller": True, "balancer": True, "run": {"out"}})


# ---------------------------------------------------------------- document parsing

def parse_document(text: str) -> Dict[str, str]:
    """Flat ``{dotted.key: raw value}`` mapping; duplicates and malformed lines are errors"""
    entries: Dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}", f"expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {number}", "empty key")
        if key in entries:
            raise ConfigError(key, "duplicated key")
        entries[key] = value
    return entries


def _nest(entries: Dict[str, str]) -> Dict[str, Any]:
    tree: Dict[str, Any] = {}
    for key, value in entries.items():
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(key, f"conflicts with scalar key {part!r}")
            node = child
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError(key, "conflicts with a nested section of the same name")
        node[parts[-1]] = value
    return tree


def _dotted(loc: Tuple[Any, ...]) -> str:
    parts = [str(part) for part in loc if part != "nodes" and not isinstance(part, int)]
    return ".".join(parts) or "scenario"


def _config_error(exc: ValidationError, prefix: str = "") -> ConfigError:
    error = exc.errors()[0]
    key = _dotted(error["loc"])
    if prefix:
        key = f"{prefix}.{key}" if error["loc"] else prefix
    if error["type"] == "missing":
        return ConfigError(key, "required key missing")
    if error["type"] == "extra_forbidden":
        return ConfigError(key, "unknown key")
    return ConfigError(key, error["msg"])


def _controller(section: Any) -> ControllerConfig:
    if section is None:
        return ControllerConfig()
    if not isinstance(section, dict):
        raise ConfigError("controller", "expected controller.name and controller.<param> keys")
    section = dict(section)
    name = section.pop("name", "none")
    cls = CONTROLLERS.get(name)
    if cls is None:
        raise ConfigError("controller.name", f"unknown controller {name!r}; choose from {', '.join(sorted(CONTROLLERS))}")
    try:
        params = cls.params_model(**section)
    except ValidationError as exc:
        raise _config_error(exc, "controller") from exc
    return ControllerConfig(name=name, params=params)


def build_scenario(tree: Dict[str, Any]) -> ScenarioConfig:
    tree = dict(tree)
    for key in REQUIRED_KEYS:
        section, field = key.split(".")
        if field not in (tree.get(section) or {}):
            raise ConfigError(key, "required key missing")
    controller = _controller(tree.pop("controller", None))
    try:
        return ScenarioConfig(**tree, controller=controller)
    except ValidationError as exc:
        raise _config_error(exc) from exc


def parse_scenario(text: str) -> ScenarioConfig:
    return build_scenario(_nest(parse_document(text)))


def load_scenario(path: str) -> ScenarioConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError("scenario", f"cannot read {path}: {exc.strerror}") from exc
    return parse_scenario(text)


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        return repr(value)
    return str(value)


def emit_scenario(cfg: ScenarioConfig) -> str:
    """Every field written explicitly; ``parse_scenario(emit_scenario(cfg)) == cfg``"""
    lines: List[str] = []

    def put(key: str, value: Any) -> None:
        if value is not None:
            lines.append(f"{key} = {_format(value)}")

    for name in ("uacs", "proxies", "cluster", "alternate"):
        put(f"topology.{name}", getattr(cfg.topology, name))

    server = cfg.server
    for name in ("mu", "service", "reject_cost", "retry_after", "occupancy_window"):
        put(f"server.{name}", getattr(server, name))
    put("server.buffer", "unlimited" if server.buffer is None else server.buffer)
    for node, override in sorted(server.nodes.items()):
        put(f"server.{node}.mu", override.mu)
        put(f"server.{node}.buffer", override.buffer)

    put("timers.t1", cfg.timers.t1)
    put("timers.t2", cfg.timers.t2)
    put("link.loss", cfg.link.loss)
    put("link.delay", cfg.link.delay)
    for name in ("teardown", "hold", "setup_timeout"):
        put(f"call.{name}", getattr(cfg.call, name))

    put("workload.rate", cfg.workload.rate)
    put("workload.segments", ", ".join(str(segment) for segment in cfg.workload.segments) or None)
    put("workload.process", cfg.workload.process)
    put("workload.slowdown", ", ".join(str(slowdown) for slowdown in cfg.workload.slowdown) or None)

    put("controller.name", cfg.controller.name)
    for name, value in cfg.controller.params.model_dump().items():
        put(f"controller.{name}", value)

    for name in ("name", "invite_cost", "bye_cost"):
        put(f"balancer.{name}", getattr(cfg.balancer, name))
    for name in ("enabled", "dt", "include_redundant_responses"):
        put(f"fluid.{name}", getattr(cfg.fluid, name))
    for name in ("duration", "seed", "sample_interval", "control_tick", "warmup", "out"):
        put(f"run.{name}", getattr(cfg.run, name))
    return "\n".join(lines) + "\n"


def with_overrides(cfg: ScenarioConfig, **sections: Dict[str, Any]) -> ScenarioConfig:
    """Copy of ``cfg`` with some fields replaced, revalidated (e.g. ``run={"seed": 3}``)"""
    tree = cfg.model_dump()
    tree["controller"] = {"name": cfg.controller.name, **cfg.controller.params.model_dump()}
    for section, values in sections.items():
        if section == "controller":
            tree["controller"] = dict(values)
            continue
        tree[section] = {**tree.get(section, {}), **values}
    # derived defaults follow the fields they derive from
    if "run" in sections and "duration" in sections["run"] and "warmup" not in sections["run"]:
        tree["run"].pop("warmup", None)
    if "timers" in sections and "t1" in sections["timers"]:
        if "control_tick" not in sections.get("run", {}):
            tree["run"].pop("control_tick", None)
        if "setup_timeout" not in sections.get("call", {}):
            tree["call"].pop("setup_timeout", None)
    return build_scenario(tree)
