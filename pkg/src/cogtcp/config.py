"""Experiment configuration files.

Configs are YAML documents with nested sections; see ``README.md`` for the
full schema. Every problem is reported as a :class:`ConfigError` naming the
offending key and its line.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Any

import yaml

from .channel import DurationDistribution
from .tcp import TcpParams

__all__ = [
    "ConfigError",
    "SweepSpec",
    "SimSettings",
    "AnalysisSettings",
    "ExperimentConfig",
    "MODES",
    "SWEEP_PARAMETERS",
    "parse_config",
    "parse_config_text",
    "dump_config",
    "config_hash",
    "mbps_to_pkts",
]

SCHEMA_VERSION = 1
MODES = ("analyze", "simulate", "compare", "sweep")
SWEEP_PARAMETERS = ("off_mean", "on_mean", "rtt", "packet_error", "link_rate", "link_mbps", "w_max", "t_min",
                    "t_max", "prop_delay")
DEFAULT_PACKET_BYTES = 1050


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = ""
        if key is not None:
            where = f"{key}"
            if line is not None:
                where += f" (line {line})"
            where += ": "
        super().__init__(where + message)
        self.key = key
        self.line = line


def mbps_to_pkts(link_mbps: float, packet_bytes: int = DEFAULT_PACKET_BYTES) -> float:
    return link_mbps * 1e6 / (8 * packet_bytes)


# ---- line-aware YAML loading -------------------------------------------------

class _Doc:
    """Plain Python data plus a key-path to line map."""

    def __init__(self, text: str):
        try:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            line = mark.line + 1 if mark is not None else None
            raise ConfigError(f"malformed file: {getattr(exc, 'problem', exc)}", "<document>", line) from None
        self.lines: dict[str, int] = {}
        if node is None:
            raise ConfigError("empty config", "<document>", 1)
        self._loader = yaml.SafeLoader("")
        try:
            self.data = self._convert(node, "")
        finally:
            self._loader.dispose()

    def _convert(self, node, path: str):
        self.lines.setdefault(path or "<document>", node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            out = {}
            for k, v in node.value:
                key = str(k.value)
                sub = f"{path}.{key}" if path else key
                if key in out:
                    raise ConfigError("duplicate key", sub, k.start_mark.line + 1)
                self.lines[sub] = k.start_mark.line + 1
                out[key] = self._convert(v, sub)
            return out
        if isinstance(node, yaml.SequenceNode):
            return [self._convert(v, f"{path}[{i}]") for i, v in enumerate(node.value)]
        return self._loader.construct_object(node, deep=True)

    def line(self, path: str) -> int | None:
        return self.lines.get(path)


# ---- typed sections ----------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    values: tuple
    keep_alpha: bool = True


@dataclass(frozen=True)
class SimSettings:
    horizon: float = 1e5
    seed: int = 0
    warmup_fraction: float = 0.1
    batch_count: int = 20
    anchor: str = "on_entry"


@dataclass(frozen=True)
class AnalysisSettings:
    tol: float = 1e-12
    max_iter: int = 1_000_000
    method: str = "power"
    kernel: str = "uniformization"
    max_states: int = 20_000_000


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str
    on: DurationDistribution
    off: DurationDistribution
    flows: tuple[TcpParams, ...]
    sweep: SweepSpec | None = None
    sim: SimSettings = field(default_factory=SimSettings)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)
    output: str | None = None
    packet_bytes: int = DEFAULT_PACKET_BYTES

    @property
    def queuing(self) -> bool:
        return self.flows[0].queuing_mode


class _Reader:
    def __init__(self, doc: _Doc):
        self.doc = doc

    def fail(self, path: str, msg: str):
        raise ConfigError(msg, path, self.doc.line(path))

    def section(self, data: Any, path: str, allowed: set[str]) -> dict:
        if not isinstance(data, dict):
            self.fail(path, "expected a mapping")
        for k in data:
            if k not in allowed:
                sub = f"{path}.{k}" if path else k
                self.fail(sub, "unknown key")
        return data

    def num(self, data: dict, key: str, path: str, default=None, *, integer=False, required=False):
        sub = f"{path}.{key}" if path else key
        if key not in data:
            if required:
                self.fail(path or "<document>", f"missing required key {key!r}")
            return default
        v = data[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            if isinstance(v, str):
                try:
                    v = float(v)
                except ValueError:
                    self.fail(sub, f"expected a number, got {data[key]!r}")
            else:
                self.fail(sub, f"expected a number, got {v!r}")
        if integer:
            if float(v) != int(v):
                self.fail(sub, f"expected an integer, got {v!r}")
            return int(v)
        return float(v)

    def flag(self, data: dict, key: str, path: str, default: bool) -> bool:
        if key not in data:
            return default
        v = data[key]
        if not isinstance(v, bool):
            self.fail(f"{path}.{key}", f"expected true/false, got {v!r}")
        return v


_DIST_KEYS = {"kind", "rate", "mean", "shape", "weights", "rates", "means", "value"}


def _dist(r: _Reader, data: Any, path: str) -> DurationDistribution:
    d = r.section(data, path, _DIST_KEYS)
    kind = d.get("kind")
    if kind not in ("exponential", "erlang", "hyperexponential", "deterministic"):
        r.fail(f"{path}.kind", f"unknown distribution kind {kind!r}")
    try:
        if kind == "deterministic":
            v = r.num(d, "value", path, r.num(d, "mean", path))
            if v is None:
                r.fail(path, "deterministic needs 'value'")
            return DurationDistribution.deterministic(v)
        if kind == "hyperexponential":
            if "weights" not in d:
                r.fail(path, "hyperexponential needs 'weights'")
            weights = [float(x) for x in d["weights"]]
            if "rates" in d:
                rates = [float(x) for x in d["rates"]]
            elif "means" in d:
                rates = [1.0 / float(x) for x in d["means"]]
            else:
                r.fail(path, "hyperexponential needs 'rates' or 'means'")
            if abs(math.fsum(weights) - 1.0) > 1e-12:
                r.fail(f"{path}.weights", "hyperexponential weights must sum to 1")
            return DurationDistribution.hyperexponential(weights, rates)
        shape = r.num(d, "shape", path, 1, integer=True) if kind == "erlang" else 1
        rate = r.num(d, "rate", path)
        mean = r.num(d, "mean", path)
        if (rate is None) == (mean is None):
            r.fail(path, "give exactly one of 'rate' or 'mean'")
        if rate is None:
            if not mean > 0:
                r.fail(f"{path}.mean", "mean must be positive")
            rate = shape / mean
        if kind == "exponential":
            if "shape" in d:
                r.fail(f"{path}.shape", "exponential takes no shape")
            return DurationDistribution.exponential(rate)
        return DurationDistribution.erlang(shape, rate)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        r.fail(path, str(exc))


_FLOW_KEYS = {"rtt", "packet_error", "w_max", "t_min", "t_max", "slow_start_clamp"}
_TCP_KEYS = {"t_min", "t_max", "w_max", "slow_start_clamp", "queuing", "flows"}
_QUEUE_KEYS = {"enabled", "prop_delay", "link_rate", "link_mbps", "packet_bytes"}


def _flows(r: _Reader, data: Any) -> tuple[tuple[TcpParams, ...], int]:
    tcp = r.section(data, "tcp", _TCP_KEYS)
    base = {
        "t_min": r.num(tcp, "t_min", "tcp", 1.0),
        "t_max": r.num(tcp, "t_max", "tcp", 64.0),
        "w_max": r.num(tcp, "w_max", "tcp", 100, integer=True),
        "slow_start_clamp": r.flag(tcp, "slow_start_clamp", "tcp", False),
    }
    q = r.section(tcp.get("queuing", {}), "tcp.queuing", _QUEUE_KEYS)
    queuing = r.flag(q, "enabled", "tcp.queuing", False)
    packet_bytes = r.num(q, "packet_bytes", "tcp.queuing", DEFAULT_PACKET_BYTES, integer=True)
    if packet_bytes < 1:
        r.fail("tcp.queuing.packet_bytes", "packet_bytes must be positive")
    extra: dict[str, Any] = {}
    if queuing:
        delay = r.num(q, "prop_delay", "tcp.queuing", required=True)
        rate = r.num(q, "link_rate", "tcp.queuing")
        mbps = r.num(q, "link_mbps", "tcp.queuing")
        if (rate is None) == (mbps is None):
            r.fail("tcp.queuing", "give exactly one of 'link_rate' or 'link_mbps'")
        if rate is None:
            rate = mbps_to_pkts(mbps, packet_bytes)
        extra = {"queuing_mode": True, "prop_delay": delay, "link_rate": rate}
    elif set(q) - {"enabled"}:
        r.fail("tcp.queuing", "queuing parameters given but queuing is not enabled")
    raw = tcp.get("flows")
    if not isinstance(raw, list) or not raw:
        r.fail("tcp.flows", "expected a non-empty list of flows")
    flows = []
    for i, f in enumerate(raw):
        path = f"tcp.flows[{i}]"
        f = r.section(f, path, _FLOW_KEYS)
        kw = dict(base)
        for k in ("t_min", "t_max"):
            if k in f:
                kw[k] = r.num(f, k, path)
        if "w_max" in f:
            kw["w_max"] = r.num(f, "w_max", path, integer=True)
        if "slow_start_clamp" in f:
            kw["slow_start_clamp"] = r.flag(f, "slow_start_clamp", path, False)
        rtt = r.num(f, "rtt", path, extra.get("prop_delay"), required=not queuing)
        kw["packet_error"] = r.num(f, "packet_error", path, 0.0)
        try:
            flows.append(TcpParams(rtt=rtt, **kw, **extra))
        except ValueError as exc:
            r.fail(path, str(exc))
    if queuing and len({(f.rtt, f.t_min, f.t_max) for f in flows}) > 1:
        r.fail("tcp.flows", "queuing flows must share rtt, t_min and t_max")
    return tuple(flows), packet_bytes


def _from_doc(doc: _Doc, mode: str | None) -> ExperimentConfig:
    r = _Reader(doc)
    top = r.section(doc.data, "", {"schema_version", "mode", "channel", "tcp", "analysis", "sim", "sweep",
                                   "output"})
    version = r.num(top, "schema_version", "", SCHEMA_VERSION, integer=True)
    if version != SCHEMA_VERSION:
        r.fail("schema_version", f"unsupported schema version {version}")
    file_mode = top.get("mode")
    if file_mode is not None and file_mode not in MODES:
        r.fail("mode", f"mode must be one of {', '.join(MODES)}")
    if mode is not None and file_mode is not None and mode != file_mode:
        r.fail("mode", f"config is for {file_mode!r} but {mode!r} was requested")
    mode = mode or file_mode
    if mode is None:
        r.fail("mode", "no mode given")
    for key in ("channel", "tcp"):
        if key not in top:
            r.fail("<document>", f"missing required section {key!r}")
    ch = r.section(top["channel"], "channel", {"on", "off"})
    for key in ("on", "off"):
        if key not in ch:
            r.fail("channel", f"missing {key!r} distribution")
    on = _dist(r, ch["on"], "channel.on")
    off = _dist(r, ch["off"], "channel.off")
    flows, packet_bytes = _flows(r, top["tcp"])

    a = r.section(top.get("analysis", {}), "analysis", {"tol", "max_iter", "method", "kernel", "max_states"})
    analysis = AnalysisSettings(
        tol=r.num(a, "tol", "analysis", 1e-12),
        max_iter=r.num(a, "max_iter", "analysis", 1_000_000, integer=True),
        method=a.get("method", "power"),
        kernel=a.get("kernel", "uniformization"),
        max_states=r.num(a, "max_states", "analysis", 20_000_000, integer=True),
    )
    if analysis.method not in ("power", "direct"):
        r.fail("analysis.method", "method must be 'power' or 'direct'")
    if analysis.kernel not in ("uniformization", "closed_form"):
        r.fail("analysis.kernel", "kernel must be 'uniformization' or 'closed_form'")
    if not analysis.tol > 0:
        r.fail("analysis.tol", "tol must be positive")

    s = r.section(top.get("sim", {}), "sim", {"horizon", "seed", "warmup_fraction", "batch_count", "anchor"})
    sim = SimSettings(
        horizon=r.num(s, "horizon", "sim", 1e5),
        seed=r.num(s, "seed", "sim", 0, integer=True),
        warmup_fraction=r.num(s, "warmup_fraction", "sim", 0.1),
        batch_count=r.num(s, "batch_count", "sim", 20, integer=True),
        anchor=s.get("anchor", "on_entry"),
    )
    if not sim.horizon > 0:
        r.fail("sim.horizon", "horizon must be positive")
    if not 0 <= sim.warmup_fraction < 1:
        r.fail("sim.warmup_fraction", "warmup_fraction must lie in [0, 1)")
    if sim.batch_count < 10:
        r.fail("sim.batch_count", "batch_count must be at least 10")
    if sim.anchor not in ("on_entry", "off_backoff"):
        r.fail("sim.anchor", "anchor must be 'on_entry' or 'off_backoff'")

    sweep = None
    if "sweep" in top:
        sw = r.section(top["sweep"], "sweep", {"parameter", "values", "keep_alpha"})
        param = sw.get("parameter")
        if param not in SWEEP_PARAMETERS:
            r.fail("sweep.parameter", f"unknown sweep parameter {param!r}")
        vals = sw.get("values")
        if not isinstance(vals, list) or not vals:
            r.fail("sweep.values", "expected a non-empty list")
        nums = []
        for i, v in enumerate(vals):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                r.fail(f"sweep.values[{i}]", f"expected a number, got {v!r}")
            nums.append(int(v) if param == "w_max" else float(v))
        sweep = SweepSpec(param, tuple(nums), r.flag(sw, "keep_alpha", "sweep", True))
        if param in ("link_rate", "link_mbps", "prop_delay") and not flows[0].queuing_mode:
            r.fail("sweep.parameter", f"sweeping {param} needs queuing enabled")
    if mode == "sweep" and sweep is None:
        r.fail("sweep", "sweep mode needs a 'sweep' section")
    output = top.get("output")
    if output is not None and not isinstance(output, str):
        r.fail("output", "expected a file path")
    return ExperimentConfig(mode, on, off, flows, sweep, sim, analysis, output, packet_bytes)


def parse_config_text(text: str, mode: str | None = None) -> ExperimentConfig:
    return _from_doc(_Doc(text), mode)


def parse_config(path, mode: str | None = None) -> ExperimentConfig:
    """Read and validate a config file; ``mode`` is the requested command."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return parse_config_text(text, mode)


def _dist_dict(d: DurationDistribution) -> dict:
    if d.kind == "exponential":
        return {"kind": "exponential", "rate": d.rate}
    if d.kind == "erlang":
        return {"kind": "erlang", "shape": d.shape, "rate": d.rate}
    if d.kind == "hyperexponential":
        return {"kind": "hyperexponential", "weights": list(d.weights), "rates": list(d.rates)}
    return {"kind": "deterministic", "value": d.value}


def to_dict(cfg: ExperimentConfig) -> dict:
    """Canonical nested form; parsing it back gives an identical config."""
    head = cfg.flows[0]
    tcp: dict[str, Any] = {"flows": []}
    if head.queuing_mode:
        tcp["queuing"] = {"enabled": True, "prop_delay": head.prop_delay, "link_rate": head.link_rate,
                          "packet_bytes": cfg.packet_bytes}
    for f in cfg.flows:
        tcp["flows"].append({
            "rtt": f.rtt, "packet_error": f.packet_error, "w_max": f.w_max,
            "t_min": f.t_min, "t_max": f.t_max, "slow_start_clamp": f.slow_start_clamp,
        })
    out: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "mode": cfg.mode,
        "channel": {"on": _dist_dict(cfg.on), "off": _dist_dict(cfg.off)},
        "tcp": tcp,
        "analysis": {"tol": cfg.analysis.tol, "max_iter": cfg.analysis.max_iter, "method": cfg.analysis.method,
                     "kernel": cfg.analysis.kernel, "max_states": cfg.analysis.max_states},
        "sim": {"horizon": cfg.sim.horizon, "seed": cfg.sim.seed, "warmup_fraction": cfg.sim.warmup_fraction,
                "batch_count": cfg.sim.batch_count, "anchor": cfg.sim.anchor},
    }
    if cfg.sweep is not None:
        out["sweep"] = {"parameter": cfg.sweep.parameter, "values": list(cfg.sweep.values),
                        "keep_alpha": cfg.sweep.keep_alpha}
    if cfg.output is not None:
        out["output"] = cfg.output
    return out


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()


def apply_sweep_value(cfg: ExperimentConfig, value) -> ExperimentConfig:
    """Config with the sweep parameter set to ``value`` on every flow."""
    param = cfg.sweep.parameter
    on, off = cfg.on, cfg.off
    flows = cfg.flows
    if param == "off_mean":
        ratio = on.mean() / off.mean()
        off = off.scaled(value / off.mean())
        if cfg.sweep.keep_alpha:
            on = on.scaled(value * ratio / on.mean())
    elif param == "on_mean":
        ratio = off.mean() / on.mean()
        on = on.scaled(value / on.mean())
        if cfg.sweep.keep_alpha:
            off = off.scaled(value * ratio / off.mean())
    elif param == "link_mbps":
        flows = tuple(replace(f, link_rate=mbps_to_pkts(value, cfg.packet_bytes)) for f in flows)
    elif param == "prop_delay":
        flows = tuple(replace(f, prop_delay=value, rtt=value) for f in flows)
    else:
        flows = tuple(replace(f, **{param: value}) for f in flows)
    return replace(cfg, on=on, off=off, flows=flows)
