import csv
import math

import numpy as np
import pytest

from cogtcp.chain import analyze_flow, build_joint, metrics_per_flow, solve_stationary
from cogtcp.channel import DurationDistribution, off_fraction
from cogtcp.simulator import (
    OUTCOME_TIMEOUT,
    TRACE_COLUMNS,
    Comparison,
    EstimateWithCI,
    FlowEstimate,
    InsufficientRegenerations,
    SimConfig,
    compare,
    empirical_off_fraction,
    on_entry_anchor,
    regeneration_stats,
    run,
    write_trace,
)
from cogtcp.tcp import TcpParams

from .conftest import generator_from_means

EXP = DurationDistribution.exponential
ON20, OFF10 = EXP(1 / 20), EXP(1 / 10)
FLOW = TcpParams(rtt=0.1, packet_error=0.01, w_max=100)


def _cfg(flows=(FLOW,), on=ON20, off=OFF10, horizon=5e4, seed=0, **kw):
    return SimConfig(tuple(flows), on, off, horizon, seed, **kw)


def _within(est: EstimateWithCI, value: float, k: float = 1.0) -> bool:
    return abs(est.point - value) <= k * est.half_width_95


def test_deterministic_per_seed():
    a, b = run(_cfg(seed=5)), run(_cfg(seed=5))
    for ta, tb in zip(a.traces, b.traces):
        for name in ("time", "phase", "interval", "w", "h", "outcome"):
            assert np.array_equal(getattr(ta, name), getattr(tb, name))
    assert a.flows == b.flows
    c = run(_cfg(seed=6))
    assert c.flows[0].throughput.point != a.flows[0].throughput.point


def test_timeline_covers_horizon():
    res = run(_cfg(horizon=1e5, seed=3))
    tl = res.timeline
    assert math.isclose(tl.on_time() + tl.off_time(), tl.horizon, rel_tol=1e-12)
    est = empirical_off_fraction(tl)
    assert est.half_width_95 > 0
    assert _within(est, 1 / 3, k=3)


def test_adding_flows_leaves_channel_untouched():
    one = run(_cfg(seed=9))
    three = run(_cfg(flows=(FLOW, FLOW, TcpParams(rtt=0.2, packet_error=0.001)), seed=9))
    assert one.timeline.starts == three.timeline.starts
    assert one.timeline.phases == three.timeline.phases
    assert np.array_equal(one.traces[0].w, three.traces[0].w)


def test_flows_observe_the_same_channel():
    flows = (FLOW, TcpParams(rtt=0.3, packet_error=0.005), TcpParams(rtt=0.05, packet_error=0.02))
    res = run(_cfg(flows=flows, on=DurationDistribution.erlang(3, 3 / 20),
                   off=DurationDistribution.erlang(3, 3 / 10), seed=4))
    tl = res.timeline
    for tr in res.traces:
        assert [tl.phase_at(t) for t in tr.time] == tr.phase.tolist()
        assert np.array_equal(tr.on, tr.phase >= tl.n_off_phases)
        assert np.all(tr.outcome[~tr.on] == OUTCOME_TIMEOUT)
        assert np.all(tr.w[~tr.on] == 1)


def test_queuing_flows_share_epochs():
    flows = [TcpParams(rtt=0.1, packet_error=p, w_max=20, prop_delay=0.1, link_rate=238.0, queuing_mode=True,
                       t_min=0.2) for p in (0.01, 0.003)]
    res = run(_cfg(flows=flows, seed=2))
    a, b = res.traces
    assert np.array_equal(a.time, b.time)
    ack = a.slot == 0
    expected = np.maximum(0.1, (a.w + b.w) / 238.0)
    np.testing.assert_allclose(a.interval[ack], expected[ack], rtol=1e-15)


def test_lossless_never_off_saturates():
    horizon = 2e4
    res = run(_cfg(flows=(TcpParams(rtt=0.1, w_max=100),), on=DurationDistribution.deterministic(2 * horizon),
                   horizon=horizon))
    est = res.flows[0]
    assert est.p_timeout.point == 0.0
    assert est.throughput.point == pytest.approx(1000.0, rel=1e-12)
    assert not np.any(res.traces[0].outcome == OUTCOME_TIMEOUT)


def test_horizon_too_short():
    with pytest.raises(ValueError, match="horizon too short"):
        run(_cfg(horizon=500.0))


def test_config_validation():
    with pytest.raises(ValueError):
        _cfg(batch_count=5)
    with pytest.raises(ValueError):
        _cfg(flows=(FLOW, TcpParams(rtt=0.1, prop_delay=0.1, link_rate=10.0, queuing_mode=True)))


def test_ci_half_width_shrinks_with_horizon():
    ratios = {"thr": [], "pto": []}
    for seed in range(6):
        short = run(_cfg(horizon=5e4, seed=seed, batch_count=50)).flows[0]
        long = run(_cfg(horizon=1e5, seed=100 + seed, batch_count=50)).flows[0]
        ratios["thr"].append(long.throughput.half_width_95 / short.throughput.half_width_95)
        ratios["pto"].append(long.p_timeout.half_width_95 / short.p_timeout.half_width_95)
    for vals in ratios.values():
        assert np.mean(vals) == pytest.approx(1 / math.sqrt(2), rel=0.2)


@pytest.mark.slow
def test_chain_equivalence_over_seeds():
    ref = analyze_flow(FLOW, generator_from_means(20, 10)).metrics
    thr_in = pto_in = 0
    for seed in range(20):
        est = run(_cfg(seed=1000 + seed)).flows[0]
        thr_in += est.throughput.contains(ref.throughput)
        pto_in += est.p_timeout.contains(ref.p_timeout)
    assert thr_in >= 18
    assert pto_in >= 18


def test_joint_chain_against_simulator_reduced_scale():
    mu = 60.0
    flows = [TcpParams(rtt=0.1, packet_error=p, w_max=8, prop_delay=0.1, link_rate=mu, queuing_mode=True, t_min=0.2)
             for p in (0.02, 0.005)]
    model = metrics_per_flow(solve_stationary(build_joint(flows, generator_from_means(20, 10))))
    sim = run(_cfg(flows=flows, horizon=1e5, seed=11))
    for m, est in zip(model, sim.flows):
        assert _within(est.throughput, m.throughput, k=3)
        assert _within(est.p_timeout, m.p_timeout, k=3)


def test_erlang3_timeout_probability_falls_with_off_duration():
    p_o = []
    for off_mean in (5.0, 10.0, 20.0):
        on = DurationDistribution.erlang(3, 3 / (2 * off_mean))
        off = DurationDistribution.erlang(3, 3 / off_mean)
        p_o.append(run(_cfg(on=on, off=off, horizon=1e5, seed=21)).flows[0].p_timeout.point)
    assert p_o[0] > p_o[1] > p_o[2]


# ---- regeneration ----------------------------------------------------------------

def test_regeneration_cycle_statistics():
    res = run(_cfg(horizon=1e5, seed=8))
    cs = regeneration_stats(res.traces[0], on_entry_anchor(res.timeline))
    assert cs.gcd_of_lengths == 1
    assert cs.cycle_lengths.min() >= 1
    est = cs.regenerative_estimates["off_attempt"]
    assert 0.0 <= est.point <= 1.0
    tr = res.traces[0]
    assert cs.mean == pytest.approx(np.diff(np.flatnonzero(on_entry_anchor(res.timeline)(tr))).mean())


def test_too_few_regenerations():
    res = run(_cfg(horizon=1e4, seed=8))
    with pytest.raises(InsufficientRegenerations, match="insufficient regenerations"):
        regeneration_stats(res.traces[0], on_entry_anchor(res.timeline), min_visits=10_000)


# ---- comparison ------------------------------------------------------------------

def test_compare_identical_inputs():
    est = FlowEstimate(EstimateWithCI(50.0, 1.0), EstimateWithCI(0.002, 1e-4), 10)

    class Ref:
        throughput, p_timeout = 50.0, 0.002

    c = compare(Ref, est)
    assert c == Comparison(0.0, 0.0, True, True, True)


@pytest.mark.parametrize("rtt, on_mean, off_mean, limit", [(0.1, 20.0, 10.0, 0.05), (0.5, 2.0, 1.0, 0.11)])
def test_compare_relative_errors(rtt, on_mean, off_mean, limit):
    flow = TcpParams(rtt=rtt, packet_error=0.01, w_max=100)
    ref = analyze_flow(flow, generator_from_means(on_mean, off_mean)).metrics
    sim = run(_cfg(flows=(flow,), on=EXP(1 / on_mean), off=EXP(1 / off_mean), horizon=1e5, seed=13)).flows[0]
    c = compare(ref, sim)
    assert c.rel_error_throughput < limit
    assert c.rel_error_p_timeout < limit


def test_trace_dump(tmp_path):
    res = run(_cfg(flows=(FLOW, FLOW), horizon=2e4, seed=1))
    path = tmp_path / "trace.csv"
    write_trace(path, res)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == TRACE_COLUMNS == ("time_s", "flow_id", "phase", "interval_s", "w", "h", "outcome")
    assert len(rows) - 1 == sum(len(t) for t in res.traces)
    first = rows[1]
    tr = res.traces[0]
    assert float(first[0]) == tr.time[0] and int(first[4]) == tr.w[0]
    assert {r[6] for r in rows[1:]} <= {"ack", "fast_retransmit", "timeout"}


def test_off_fraction_helper_agrees_with_distribution():
    assert off_fraction(ON20, OFF10) == pytest.approx(1 / 3)
