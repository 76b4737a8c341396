"""Event-driven Monte Carlo simulation of TCP windows over an ON/OFF channel.

The channel is an alternating renewal process whose ON and OFF durations
are drawn from arbitrary :class:`~cogtcp.channel.DurationDistribution` laws.
Flows act at window granularity: at each attempt epoch the channel state at
that instant decides the outcome, exactly as in the analytical chain.

Flows in queuing mode share attempt epochs (one bottleneck, round interval
``max(Delta, sum(w) / mu)``); other flows run independently against the
same channel timeline.
"""
from __future__ import annotations

import bisect
import csv
import logging
import math
from array import array
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .chain import check_shared_link
from .channel import DurationDistribution, make_phase_type, off_fraction, sample_duration
from .tcp import MIN_SSTHRESH, TcpParams

__all__ = [
    "SimConfig",
    "EstimateWithCI",
    "FlowEstimate",
    "CycleStats",
    "ChannelTimeline",
    "Trace",
    "SimResult",
    "Comparison",
    "InsufficientRegenerations",
    "run",
    "regeneration_stats",
    "on_entry_anchor",
    "off_backoff_anchor",
    "batch_means",
    "compare",
    "write_trace",
    "empirical_off_fraction",
]

log = logging.getLogger(__name__)

OUTCOME_ACK = 0
OUTCOME_FAST_RETRANSMIT = 1
OUTCOME_TIMEOUT = 2
OUTCOME_NAMES = ("ack", "fast_retransmit", "timeout")

_CHUNK = 1 << 16


class InsufficientRegenerations(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    flows: tuple[TcpParams, ...]
    on: DurationDistribution
    off: DurationDistribution
    horizon: float
    seed: int = 0
    warmup_fraction: float = 0.1
    batch_count: int = 20
    anchor: str = "on_entry"

    def __post_init__(self):
        object.__setattr__(self, "flows", tuple(self.flows))
        if not self.flows:
            raise ValueError("need at least one flow")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.batch_count < 10:
            raise ValueError("batch_count must be at least 10")
        if self.anchor not in ("on_entry", "off_backoff"):
            raise ValueError(f"unknown anchor {self.anchor!r}")
        queued = [f for f in self.flows if f.queuing_mode]
        if queued and len(queued) != len(self.flows):
            raise ValueError("either every flow or no flow runs in queuing mode")


@dataclass(frozen=True)
class EstimateWithCI:
    point: float
    half_width_95: float
    method: str = "batch-means"

    @property
    def low(self) -> float:
        return self.point - self.half_width_95

    @property
    def high(self) -> float:
        return self.point + self.half_width_95

    def contains(self, value: float) -> bool:
        return self.low <= value <= self.high


@dataclass(frozen=True)
class FlowEstimate:
    throughput: EstimateWithCI
    p_timeout: EstimateWithCI
    attempts: int


@dataclass(frozen=True)
class CycleStats:
    anchor: str
    cycle_lengths: np.ndarray
    mean: float
    second_moment: float
    gcd_of_lengths: int
    regenerative_estimates: dict

    @property
    def moment_ratio(self) -> float:
        return self.second_moment / self.mean**2


class _PhaseSource:
    """Draws one period as ``(phase ids, sojourns)``."""

    def __init__(self, dist: DurationDistribution, offset: int):
        self.dist = dist
        self.offset = offset
        self.ph = make_phase_type(dist) if dist.is_phase_type else None
        self.size = self.ph.size if self.ph is not None else 1
        if self.ph is not None:
            self.entry_phases = tuple(offset + i for i in np.flatnonzero(self.ph.entry > 0))
        else:
            self.entry_phases = (offset,)

    def draw(self, rng: np.random.Generator) -> tuple[list[int], list[float]]:
        if self.dist.kind == "exponential":
            return [self.offset], [float(rng.exponential(1.0 / self.dist.rate))]
        if self.ph is None:
            return [self.offset], [sample_duration(self.dist, rng)]
        phases, sojourns = self.ph.sample_path(rng)
        return [self.offset + i for i in phases], sojourns


@dataclass
class ChannelTimeline:
    """Piecewise-constant channel phase on ``[0, horizon)``.

    Phase ids follow the generator convention: OFF phases first, then ON
    phases. Segment ``k`` covers ``[starts[k], starts[k+1])``.
    """

    starts: list
    phases: list
    on: list
    horizon: float
    n_off_phases: int
    on_entry_phases: tuple
    off_entry_phases: tuple

    @classmethod
    def sample(cls, on: DurationDistribution, off: DurationDistribution, horizon: float,
               rng: np.random.Generator) -> "ChannelTimeline":
        off_src = _PhaseSource(off, 0)
        on_src = _PhaseSource(on, off_src.size)
        starts: list[float] = []
        phases: list[int] = []
        flags: list[bool] = []
        t = 0.0
        is_on = True
        while t < horizon:
            src = on_src if is_on else off_src
            ph, soj = src.draw(rng)
            for p, d in zip(ph, soj):
                starts.append(t)
                phases.append(p)
                flags.append(is_on)
                t += d
            is_on = not is_on
        return cls(starts, phases, flags, horizon, off_src.size, on_src.entry_phases, off_src.entry_phases)

    def ends(self) -> list[float]:
        return self.starts[1:] + [self.horizon]

    def on_time(self) -> float:
        return math.fsum(min(e, self.horizon) - s for s, e, f in zip(self.starts, self.ends(), self.on) if f)

    def off_time(self) -> float:
        return math.fsum(min(e, self.horizon) - s for s, e, f in zip(self.starts, self.ends(), self.on) if not f)

    def phase_at(self, t: float) -> int:
        return self.phases[bisect.bisect_right(self.starts, t) - 1]


@dataclass
class Trace:
    """Per-attempt record of one flow."""

    flow_id: int
    time: np.ndarray
    phase: np.ndarray
    on: np.ndarray
    slot: np.ndarray
    interval: np.ndarray
    w: np.ndarray
    h: np.ndarray
    outcome: np.ndarray

    def __len__(self) -> int:
        return self.time.size


@dataclass
class SimResult:
    config: SimConfig
    flows: list[FlowEstimate]
    cycle_stats: CycleStats | None
    timeline: ChannelTimeline
    traces: list[Trace] = field(repr=False)


class _Uniforms:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.buf = rng.random(_CHUNK).tolist()
        self.pos = 0


def _streams(seed: int, n_flows: int):
    channel = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(0,))))
    flows = [np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(1, i))))
             for i in range(n_flows)]
    return channel, flows


def _simulate_group(flows: Sequence[TcpParams], flow_ids: Sequence[int], timeline: ChannelTimeline,
                    rngs: Sequence[np.random.Generator]) -> list[Trace]:
    """Flows sharing attempt epochs (one flow, or a queuing group)."""
    n = len(flows)
    head = flows[0]
    ladder = head.ladder
    ladder_values = [ladder.value(s) for s in range(ladder.top_slot + 1)]
    top = ladder.top_slot
    queuing = head.queuing_mode
    delay, rate, rtt = head.prop_delay, head.link_rate, head.rtt
    clean = [[(1.0 - f.packet_error) ** w for w in range(f.w_max + 1)] for f in flows]
    wmax = [f.w_max for f in flows]
    clamp = [f.slow_start_clamp for f in flows]
    unif = [_Uniforms(r) for r in rngs]

    starts, seg_phase, seg_on = timeline.starts, timeline.phases, timeline.on
    n_seg = len(starts)
    horizon = timeline.horizon

    ws = [1] * n
    hs = [MIN_SSTHRESH] * n
    slot = 0
    rec_t, rec_j, rec_ph, rec_slot = array("d"), array("d"), array("l"), array("l")
    rec_w = [array("l") for _ in range(n)]
    rec_h = [array("l") for _ in range(n)]
    rec_o = [array("b") for _ in range(n)]

    t = max(delay, n / rate) if queuing else rtt
    seg = 0
    while t < horizon:
        while seg + 1 < n_seg and starts[seg + 1] <= t:
            seg += 1
        if seg_on[seg]:
            for i in range(n):
                u = unif[i]
                if u.pos == _CHUNK:
                    u.buf = u.rng.random(_CHUNK).tolist()
                    u.pos = 0
                x = u.buf[u.pos]
                u.pos += 1
                w = ws[i]
                if x < clean[i][w]:
                    if w < hs[i]:
                        w2 = 2 * w
                        if clamp[i] and w2 > hs[i]:
                            w2 = hs[i]
                    else:
                        w2 = w + 1
                    ws[i] = w2 if w2 < wmax[i] else wmax[i]
                    rec_o[i].append(OUTCOME_ACK)
                else:
                    half = w // 2
                    ws[i] = half if half > 1 else 1
                    hs[i] = half if half > MIN_SSTHRESH else MIN_SSTHRESH
                    rec_o[i].append(OUTCOME_FAST_RETRANSMIT)
            slot = 0
            if queuing:
                tot = sum(ws) / rate
                j = tot if tot > delay else delay
            else:
                j = rtt
        else:
            for i in range(n):
                half = ws[i] // 2
                hs[i] = half if half > MIN_SSTHRESH else MIN_SSTHRESH
                ws[i] = 1
                rec_o[i].append(OUTCOME_TIMEOUT)
            slot = slot + 1 if slot < top else top
            j = ladder_values[slot]
        rec_t.append(t)
        rec_j.append(j)
        rec_ph.append(seg_phase[seg])
        rec_slot.append(slot)
        for i in range(n):
            rec_w[i].append(ws[i])
            rec_h[i].append(hs[i])
        t += j

    time = np.frombuffer(rec_t, dtype=float).copy()
    interval = np.frombuffer(rec_j, dtype=float).copy()
    phase = np.array(rec_ph, dtype=np.int64)
    slots = np.array(rec_slot, dtype=np.int64)
    on = phase >= timeline.n_off_phases
    return [
        Trace(fid, time, phase, on, slots, interval, np.array(rec_w[i], dtype=np.int64),
              np.array(rec_h[i], dtype=np.int64), np.array(rec_o[i], dtype=np.int8))
        for i, fid in enumerate(flow_ids)
    ]


def batch_means(num: np.ndarray, den: np.ndarray, batch: np.ndarray, batch_count: int) -> EstimateWithCI:
    """Ratio estimate ``sum(num) / sum(den)`` with a batch-means 95% half-width."""
    bn = np.bincount(batch, weights=num, minlength=batch_count)
    bd = np.bincount(batch, weights=den, minlength=batch_count)
    if np.any(bd <= 0):
        raise ValueError("empty batch; lengthen the horizon or use fewer batches")
    ratios = bn / bd
    point = float(bn.sum() / bd.sum())
    tq = stats.t.ppf(0.975, batch_count - 1)
    hw = float(tq * ratios.std(ddof=1) / math.sqrt(batch_count))
    return EstimateWithCI(point, hw, "batch-means")


def _flow_estimates(tr: Trace, cfg: SimConfig) -> FlowEstimate:
    t0 = cfg.warmup_fraction * cfg.horizon
    keep = tr.time >= t0
    span = cfg.horizon - t0
    batch = np.minimum(((tr.time[keep] - t0) / span * cfg.batch_count).astype(np.int64), cfg.batch_count - 1)
    w = tr.w[keep].astype(float)
    on = tr.on[keep]
    thr = batch_means(w * on, tr.interval[keep], batch, cfg.batch_count)
    pto = batch_means((~on).astype(float), w, batch, cfg.batch_count)
    return FlowEstimate(thr, pto, int(keep.sum()))


def on_entry_anchor(timeline: ChannelTimeline) -> Callable[[Trace], np.ndarray]:
    """Attempts in an ON entry phase right after an acknowledged round with ``(w, h) = (1, 2)``."""
    entry = np.array(timeline.on_entry_phases)

    def pred(tr: Trace) -> np.ndarray:
        return np.isin(tr.phase, entry) & (tr.slot == 0) & (tr.w == 1) & (tr.h == MIN_SSTHRESH)

    pred.__name__ = "on_entry"
    return pred


def off_backoff_anchor(timeline: ChannelTimeline, slot: int = 2) -> Callable[[Trace], np.ndarray]:
    """Attempts in an OFF entry phase at the ``slot``-th consecutive timeout with ``(w, h) = (1, 2)``."""
    entry = np.array(timeline.off_entry_phases)

    def pred(tr: Trace) -> np.ndarray:
        return np.isin(tr.phase, entry) & (tr.slot == slot) & (tr.w == 1) & (tr.h == MIN_SSTHRESH)

    pred.__name__ = "off_backoff"
    return pred


def regeneration_stats(trace: Trace, anchor: Callable[[Trace], np.ndarray],
                       predicates: dict[str, Callable[[Trace], np.ndarray]] | None = None,
                       min_visits: int = 100) -> CycleStats:
    """Split the attempt sequence at anchor visits and summarise the cycles.

    Each predicate ``A`` yields the ratio estimator
    ``E[sum_{k<N} 1_A] / E[N]`` with a 95% half-width from the usual
    ratio-estimator variance.
    """
    visits = np.flatnonzero(anchor(trace))
    if visits.size < min_visits:
        raise InsufficientRegenerations(f"insufficient regenerations ({visits.size} < {min_visits})")
    lengths = np.diff(visits)
    n_cyc = lengths.size
    mean = float(lengths.mean())
    m2 = float((lengths.astype(float) ** 2).mean())
    gcd = int(np.gcd.reduce(lengths))
    if predicates is None:
        predicates = {"off_attempt": lambda tr: ~tr.on}
    estimates = {}
    z = stats.norm.ppf(0.975)
    for name, pred in predicates.items():
        hits = pred(trace).astype(np.int64)
        cum = np.concatenate([[0], np.cumsum(hits)])
        per_cycle = (cum[visits[1:]] - cum[visits[:-1]]).astype(float)
        r = per_cycle.sum() / lengths.sum()
        resid = per_cycle - r * lengths
        hw = float(z * resid.std(ddof=1) / (mean * math.sqrt(n_cyc)))
        estimates[name] = EstimateWithCI(float(r), hw, "regenerative")
    return CycleStats(getattr(anchor, "__name__", "anchor"), lengths, mean, m2, gcd, estimates)


def run(cfg: SimConfig) -> SimResult:
    """Simulate every flow over one sampled channel timeline."""
    span = cfg.horizon * (1 - cfg.warmup_fraction)
    longest = max(f.ladder.t_max for f in cfg.flows)
    if span / cfg.batch_count < longest:
        raise ValueError(f"horizon too short for {cfg.batch_count} batches")
    cycle = cfg.on.mean() + cfg.off.mean()
    if cfg.horizon < 1000 * cycle:
        log.warning("horizon %.3g s covers fewer than 1000 ON/OFF cycles; CIs may be unreliable", cfg.horizon)
    ch_rng, flow_rngs = _streams(cfg.seed, len(cfg.flows))
    timeline = ChannelTimeline.sample(cfg.on, cfg.off, cfg.horizon, ch_rng)
    if cfg.flows[0].queuing_mode:
        check_shared_link(cfg.flows)
        traces = _simulate_group(cfg.flows, range(len(cfg.flows)), timeline, flow_rngs)
    else:
        traces = []
        for i, f in enumerate(cfg.flows):
            traces.extend(_simulate_group([f], [i], timeline, [flow_rngs[i]]))
    flows = [_flow_estimates(tr, cfg) for tr in traces]
    anchor = on_entry_anchor(timeline) if cfg.anchor == "on_entry" else off_backoff_anchor(timeline)
    try:
        cycles = regeneration_stats(traces[0], anchor)
    except InsufficientRegenerations as exc:
        log.info("no cycle statistics: %s", exc)
        cycles = None
    return SimResult(cfg, flows, cycles, timeline, traces)


def empirical_off_fraction(timeline: ChannelTimeline, batch_count: int = 20) -> EstimateWithCI:
    """Fraction of ``[0, horizon)`` spent OFF, with a batch-means half-width."""
    edges = np.linspace(0.0, timeline.horizon, batch_count + 1)
    starts = np.array(timeline.starts)
    ends = np.minimum(np.array(timeline.ends()), timeline.horizon)
    off = ~np.array(timeline.on)
    per_batch = np.array([
        np.clip(np.minimum(ends[off], b) - np.maximum(starts[off], a), 0.0, None).sum()
        for a, b in zip(edges[:-1], edges[1:])
    ]) / (edges[1] - edges[0])
    tq = stats.t.ppf(0.975, batch_count - 1)
    hw = float(tq * per_batch.std(ddof=1) / math.sqrt(batch_count))
    return EstimateWithCI(timeline.off_time() / timeline.horizon, hw)


def expected_off_fraction(cfg: SimConfig) -> float:
    return off_fraction(cfg.on, cfg.off)


@dataclass(frozen=True)
class Comparison:
    rel_error_throughput: float
    rel_error_p_timeout: float
    within_ci: bool
    throughput_within_ci: bool
    p_timeout_within_ci: bool


def compare(analytical, simulated: FlowEstimate) -> Comparison:
    """Relative errors of the simulated estimates against analytical metrics."""

    def rel(sim: float, ref: float) -> float:
        if ref == 0:
            return 0.0 if sim == 0 else math.inf
        return abs(sim - ref) / abs(ref)

    thr_ok = simulated.throughput.contains(analytical.throughput)
    pto_ok = simulated.p_timeout.contains(analytical.p_timeout)
    return Comparison(
        rel(simulated.throughput.point, analytical.throughput),
        rel(simulated.p_timeout.point, analytical.p_timeout),
        thr_ok and pto_ok,
        thr_ok,
        pto_ok,
    )


TRACE_COLUMNS = ("time_s", "flow_id", "phase", "interval_s", "w", "h", "outcome")


def write_trace(path, result: SimResult) -> None:
    """One CSV row per attempt epoch, flows in order."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(TRACE_COLUMNS)
        for tr in result.traces:
            for k in range(len(tr)):
                out.writerow((repr(float(tr.time[k])), tr.flow_id, int(tr.phase[k]),
                              repr(float(tr.interval[k])), int(tr.w[k]), int(tr.h[k]),
                              OUTCOME_NAMES[tr.outcome[k]]))
