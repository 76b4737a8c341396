import csv
import io
import math
from pathlib import Path

import pytest

from cogtcp import cli
from cogtcp.config import (
    ConfigError,
    apply_sweep_value,
    config_hash,
    dump_config,
    mbps_to_pkts,
    parse_config,
    parse_config_text,
)

ROOT = Path(__file__).resolve().parents[1]
DATA = Path(__file__).parent / "data"
GOLDEN = Path(__file__).parent / "golden"

MINIMAL = """\
schema_version: 1
channel:
  on: {kind: exponential, mean: 20}
  off: {kind: exponential, mean: 10}
tcp:
  flows:
    - {rtt: 0.1, packet_error: 0.01}
"""


def _read_table(text: str):
    meta = [ln for ln in text.splitlines() if ln.startswith("#")]
    body = "\n".join(ln for ln in text.splitlines() if not ln.startswith("#"))
    rows = list(csv.reader(io.StringIO(body)))
    return meta, rows[0], rows[1:]


def _run_cli(tmp_path, mode, config, *extra):
    out = tmp_path / f"{mode}.csv"
    code = cli.main([mode, "--config", str(config), "--out", str(out), *extra])
    return code, out


# ---- parsing -------------------------------------------------------------------

def test_minimal_defaults():
    cfg = parse_config_text(MINIMAL, "analyze")
    f = cfg.flows[0]
    assert (f.t_min, f.t_max, f.w_max) == (1.0, 64.0, 100)
    assert cfg.sim.warmup_fraction == 0.1
    assert cfg.on.mean() == pytest.approx(20.0) and cfg.off.mean() == pytest.approx(10.0)


def test_table1_config():
    cfg = parse_config(ROOT / "configs" / "table1.yaml")
    assert cfg.mode == "analyze"
    assert len(cfg.flows) == 6
    assert cfg.on.kind == "erlang" and cfg.on.shape == 2
    assert cfg.on.mean() == pytest.approx(20.0) and cfg.off.mean() == pytest.approx(10.0)
    assert sorted({f.rtt for f in cfg.flows}) == [0.05, 0.1, 0.2]
    assert sorted({f.packet_error for f in cfg.flows}) == [0.005, 0.01]


def test_every_shipped_config_parses():
    for path in (ROOT / "configs").glob("*.yaml"):
        cfg = parse_config(path, "analyze" if path.name == "minimal.yaml" else None)
        assert cfg.flows


def test_weights_must_sum_to_one():
    text = MINIMAL.replace("{kind: exponential, mean: 10}",
                           "{kind: hyperexponential, weights: [0.5, 0.4], rates: [1, 2]}")
    with pytest.raises(ConfigError, match="hyperexponential weights must sum to 1") as info:
        parse_config_text(text, "analyze")
    assert info.value.key == "channel.off.weights"
    assert info.value.line == 4


def test_unknown_key_names_key_and_line():
    text = MINIMAL + "  bogus: 3\n"
    with pytest.raises(ConfigError) as info:
        parse_config_text(text, "analyze")
    assert info.value.key == "tcp.bogus"
    assert info.value.line == 8
    assert "tcp.bogus (line 8): unknown key" in str(info.value)


def test_malformed_file_reports_line():
    with pytest.raises(ConfigError, match="malformed") as info:
        parse_config_text("channel:\n  on: [1, 2\n", "analyze")
    assert info.value.line is not None


@pytest.mark.parametrize("bad, key", [
    ("schema_version: 1\nmode: fly\n", "mode"),
    (MINIMAL.replace("mean: 20", "mean: -20"), "channel.on.mean"),
    (MINIMAL.replace("packet_error: 0.01", "packet_error: 1.5"), "tcp.flows[0]"),
    (MINIMAL + "sweep: {parameter: colour, values: [1]}\n", "sweep.parameter"),
    (MINIMAL + "sim: {batch_count: 3}\n", "sim.batch_count"),
])
def test_invariant_violations(bad, key):
    with pytest.raises(ConfigError) as info:
        parse_config_text(bad, "analyze")
    assert info.value.key == key


def test_mode_conflict():
    with pytest.raises(ConfigError, match="requested"):
        parse_config(ROOT / "configs" / "table1.yaml", "sweep")


def test_sweep_mode_needs_sweep_section():
    with pytest.raises(ConfigError) as info:
        parse_config_text(MINIMAL, "sweep")
    assert info.value.key == "sweep"


@pytest.mark.parametrize("name", ["minimal.yaml", "table1.yaml", "table2.yaml", "fig4_off_sweep.yaml",
                                  "fig5_per_sweep.yaml", "fig7_link_sweep.yaml"])
def test_round_trip(name):
    cfg = parse_config(ROOT / "configs" / name, None if name != "minimal.yaml" else "analyze")
    again = parse_config_text(dump_config(cfg))
    assert again == cfg
    assert config_hash(again) == config_hash(cfg)


def test_link_mbps_conversion():
    assert mbps_to_pkts(1) == pytest.approx(119.05, abs=5e-3)
    assert mbps_to_pkts(5) == pytest.approx(595.24, abs=5e-3)
    cfg = parse_config(ROOT / "configs" / "table2.yaml")
    assert cfg.flows[0].link_rate == pytest.approx(2e6 / (8 * 1050))
    assert all(f.rtt == 0.1 for f in cfg.flows)


def test_sweep_keeps_alpha():
    cfg = parse_config(ROOT / "configs" / "fig4_off_sweep.yaml")
    for v in cfg.sweep.values:
        point = apply_sweep_value(cfg, v)
        assert point.off.mean() == pytest.approx(v)
        assert point.off.mean() / (point.on.mean() + point.off.mean()) == pytest.approx(1 / 3)


# ---- output contract -------------------------------------------------------------

@pytest.mark.parametrize("mode", ["analyze", "simulate", "compare", "sweep"])
def test_golden_outputs(tmp_path, mode):
    code, out = _run_cli(tmp_path, mode, DATA / f"{mode}_small.yaml")
    assert code == 0
    meta, header, rows = _read_table(out.read_text())
    g_meta, g_header, g_rows = _read_table((GOLDEN / f"{mode}_small.csv").read_text())
    assert header == g_header == list(cli.COLUMNS[mode])
    assert [m.split(":")[0] for m in meta] == ["# tool", "# mode", "# config_sha256", "# seed"]
    assert meta[1:] == g_meta[1:]
    assert len(rows) == len(g_rows)
    for row, g_row in zip(rows, g_rows):
        for a, b in zip(row, g_row):
            try:
                fa, fb = float(a), float(b)
            except ValueError:
                assert a == b
                continue
            assert fa == pytest.approx(fb, rel=1e-9, abs=1e-15)


def test_documented_column_order():
    assert cli.ANALYZE_COLUMNS[:6] == ("flow", "rtt_s", "packet_error", "p_timeout", "throughput_pkts_per_s",
                                       "mean_window")
    assert "naive_product_throughput" in cli.SWEEP_COLUMNS
    readme = (ROOT / "README.md").read_text()
    for cols in cli.COLUMNS.values():
        assert ",".join(cols) in readme


def test_compare_matches_recomputation(tmp_path):
    # the same experiment, runnable under every mode
    shared = tmp_path / "shared.yaml"
    shared.write_text("".join(ln for ln in (DATA / "compare_small.yaml").read_text().splitlines(True)
                              if not ln.startswith("mode:")))
    _, a = _run_cli(tmp_path, "analyze", shared)
    _, s = _run_cli(tmp_path, "simulate", shared)
    _, c = _run_cli(tmp_path, "compare", shared)
    _, ah, ar = _read_table(a.read_text())
    _, sh, sr = _read_table(s.read_text())
    _, ch, cr = _read_table(c.read_text())
    for a_row, s_row, c_row in zip(ar, sr, cr):
        model, sim, comp = dict(zip(ah, a_row)), dict(zip(sh, s_row)), dict(zip(ch, c_row))
        for metric, a_col in (("p_timeout", "p_timeout"), ("throughput", "throughput_pkts_per_s")):
            ref, got = float(model[a_col]), float(sim[a_col])
            assert repr(abs(got - ref) / abs(ref)) == comp[f"rel_error_{metric}"]


def test_sweep_rows_in_order_and_parallel_identical(tmp_path):
    cfg = DATA / "sweep_small.yaml"
    out1 = tmp_path / "serial.csv"
    out2 = tmp_path / "parallel.csv"
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(out1)]) == 0
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(out2), "--jobs", "3"]) == 0
    assert out1.read_text() == out2.read_text()
    _, header, rows = _read_table(out1.read_text())
    assert [float(r[header.index("value")]) for r in rows] == [5.0, 10.0, 20.0]


def test_sweep_naive_product_column(tmp_path):
    code, out = _run_cli(tmp_path, "sweep", DATA / "sweep_small.yaml")
    _, header, rows = _read_table(out.read_text())
    cfg = parse_config(DATA / "sweep_small.yaml")
    from cogtcp.chain import always_on_throughput

    expected = (1 - 1 / 3) * always_on_throughput(cfg.flows[0])
    for r in rows:
        assert float(r[header.index("naive_product_throughput")]) == pytest.approx(expected, rel=1e-9)


def test_seed_override_changes_preamble(tmp_path):
    code, out = _run_cli(tmp_path, "simulate", DATA / "simulate_small.yaml", "--seed", "99")
    assert code == 0
    meta, _, _ = _read_table(out.read_text())
    assert meta[3] == "# seed: 99"


# ---- exit codes and failure hygiene ------------------------------------------------

def test_exit_code_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(MINIMAL + "  bogus: 3\n")
    code, out = _run_cli(tmp_path, "analyze", bad)
    assert code == 1
    assert not out.exists()
    assert "tcp.bogus (line 8)" in capsys.readouterr().err


def test_exit_code_state_guard(tmp_path):
    cfg = tmp_path / "big.yaml"
    cfg.write_text(MINIMAL + "analysis: {max_states: 50}\n")
    code, out = _run_cli(tmp_path, "analyze", cfg)
    assert code == 1
    assert not out.exists()


def test_exit_code_non_convergence(tmp_path, capsys):
    cfg = tmp_path / "slow.yaml"
    cfg.write_text(MINIMAL + "analysis: {max_iter: 10}\n")
    trace = tmp_path / "trace.csv"
    code, out = _run_cli(tmp_path, "analyze", cfg, "--trace", str(trace))
    assert code == 2
    assert not out.exists()
    assert not trace.exists()
    assert "numerical failure" in capsys.readouterr().err
    assert not list(tmp_path.glob(".*.part"))


def test_exit_code_kernel_horizon(tmp_path, capsys):
    cfg = tmp_path / "fast.yaml"
    # t * lambda_u reaches about 2048 * 2000, past the 1e6 guard
    text = MINIMAL.replace("mean: 20", "mean: 0.001").replace("mean: 10", "mean: 0.001")
    cfg.write_text(text.replace("tcp:\n", "tcp:\n  t_max: 2048\n"))
    code, out = _run_cli(tmp_path, "analyze", cfg)
    assert code == 2
    assert not out.exists()
    assert "kernel horizon too large" in capsys.readouterr().err


def test_analysis_of_deterministic_channel_is_a_config_error(tmp_path):
    cfg = tmp_path / "det.yaml"
    cfg.write_text(MINIMAL.replace("{kind: exponential, mean: 10}", "{kind: deterministic, value: 10}"))
    code, _ = _run_cli(tmp_path, "analyze", cfg)
    assert code == 1


def test_existing_output_survives_failure(tmp_path):
    cfg = tmp_path / "slow.yaml"
    cfg.write_text(MINIMAL + "analysis: {max_iter: 10}\n")
    out = tmp_path / "analyze.csv"
    out.write_text("previous\n")
    assert cli.main(["analyze", "--config", str(cfg), "--out", str(out)]) == 2
    assert out.read_text() == "previous\n"


def test_plot_script_and_trace(tmp_path):
    trace = tmp_path / "trace.csv"
    code, out = _run_cli(tmp_path, "simulate", DATA / "simulate_small.yaml", "--emit-plot-script",
                         "--trace", str(trace))
    assert code == 0
    script = out.with_name(out.stem + "_plot.py")
    compile(script.read_text(), str(script), "exec")
    assert str(out) in script.read_text()
    header = trace.read_text().splitlines()[0]
    assert header == "time_s,flow_id,phase,interval_s,w,h,outcome"


def test_stdout_when_no_output(capsys):
    assert cli.main(["analyze", "--config", str(DATA / "analyze_small.yaml")]) == 0
    text = capsys.readouterr().out
    assert text.startswith("# tool: cogtcp")
    assert math.isfinite(float(text.splitlines()[5].split(",")[4]))
