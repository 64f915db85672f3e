import math

import numpy as np
import pytest

from satchain import harness
from satchain.harness import (
    SweepAssertionError,
    SweepSpec,
    estimate_effective_tps,
    loss_base,
    rows_to_csv,
    rows_to_json,
    run_loss_sweep,
    run_throughput_sweep,
    success_probability,
    throughput_base,
    throughput_bounds,
)
from satchain.sim import RunMetrics, RunResult
from satchain.sim import run as sim_run

# 3 q^2 (1 - q) + q^3 with q = 0.94 ** 20, evaluated by hand in a REPL
ORACLE_P06 = 0.2036532645132535


def monte_carlo(p, m, n, rounds, seed):
    rng = np.random.default_rng(seed)
    complete = (rng.random((rounds, n, m)) >= p).all(axis=2).sum(axis=1)
    return float((2 * complete > n).mean())


def test_bounds_basic():
    assert throughput_bounds(0.6e6, 1.2e6, 15) == (5000.0, 10000.0)
    s_min, s_max = throughput_bounds(1e6, 1e6, 100)
    assert s_min == s_max
    with pytest.raises(ValueError):
        throughput_bounds(2e6, 1e6, 15)
    with pytest.raises(ValueError):
        throughput_bounds(1e6, 1e6, 0)


def test_success_probability_edges():
    assert success_probability(0.0, 20, 3) == 1.0
    assert success_probability(1.0, 1, 3) == 0.0
    assert success_probability(0.5, 1, 1) == 0.5
    with pytest.raises(ValueError):
        success_probability(1.5, 20, 3)


def test_success_probability_closed_form():
    q = 0.94 ** 20
    assert q == pytest.approx(0.2901, abs=1e-4)
    assert success_probability(0.06, 20, 3) == pytest.approx(ORACLE_P06, rel=1e-12)
    assert ORACLE_P06 == pytest.approx(3 * q * q * (1 - q) + q ** 3, rel=1e-12)


def test_success_probability_matches_monte_carlo():
    est = monte_carlo(0.06, 20, 3, 10**6, seed=2024)
    # binomial 3 sigma at 10^6 rounds is about 0.0012
    assert abs(est - ORACLE_P06) < 0.0015


@pytest.mark.parametrize("p,n", [(0.03, 3), (0.09, 5), (0.15, 3)])
def test_success_probability_other_points(p, n):
    est = monte_carlo(p, 20, n, 200_000, seed=7)
    assert abs(est - success_probability(p, 20, n)) < 0.004


def test_thirty_percent_loss_is_unusable():
    assert success_probability(0.30, 20, 3) == pytest.approx(1.909e-6, rel=1e-3)


def test_effective_tps():
    assert estimate_effective_tps(20e9, 300, 0.75) == pytest.approx(6.25e6)
    assert estimate_effective_tps(20e9, 300, 1.0) == pytest.approx(throughput_bounds(20e9, 20e9, 300)[1])
    assert estimate_effective_tps(20e9, 300, 0.57) == pytest.approx(4.75e6)
    with pytest.raises(ValueError):
        estimate_effective_tps(1e6, 15, 0.0)


def test_sweep_spec_ordering_and_seeds():
    spec = SweepSpec(loss_base(seed=10), "loss_rate", [0.2, 0.1], repetitions=2)
    got = [(v, rep, cfg.seed, cfg.satellite.loss_rate) for v, rep, cfg in spec.configs()]
    assert got == [(0.2, 0, 10, 0.2), (0.2, 1, 11, 0.2), (0.1, 0, 10, 0.1), (0.1, 1, 11, 0.1)]


def test_sweep_spec_validation():
    with pytest.raises(ValueError):
        SweepSpec(loss_base(), "loss_rate", [])
    with pytest.raises(ValueError):
        SweepSpec(loss_base(), "no_such_field", [1])


def test_offered_rate_split_across_clients():
    spec = SweepSpec(throughput_base(), "offered_rate", [3000.0])
    (_, _, cfg), = spec.configs()
    assert cfg.client_count == 3 and cfg.client_rate == 1000.0 and cfg.offered_rate == 3000.0


def test_csv_format():
    text = rows_to_csv([{"a": 1, "b": 1 / 3, "c": 1e7 / 3}], ["a", "b", "c"])
    assert text == "a,b,c\n1,0.333333,3.33333e+06\n"
    assert rows_to_json([{"a": 1}]).startswith("[")


def test_throughput_sweep_small_and_deterministic():
    base = throughput_base(duration_s=2.0)
    spec = SweepSpec(base, "offered_rate", [0.0, 2000.0])
    rows = run_throughput_sweep(spec)
    assert rows[0]["throughput"] == 0.0
    assert rows[1]["throughput"] == pytest.approx(2000.0, rel=0.02)
    assert rows_to_csv(rows) == rows_to_csv(run_throughput_sweep(spec))


def test_throughput_sweep_flags_bound_violation(monkeypatch):
    def fake_run(cfg):
        return RunResult(cfg, RunMetrics(throughput=1e9), [], [], [])
    monkeypatch.setattr(harness, "run", fake_run)
    spec = SweepSpec(throughput_base(duration_s=1.0), "offered_rate", [100.0])
    with pytest.raises(SweepAssertionError) as err:
        run_throughput_sweep(spec)
    assert err.value.row["offered_rate"] == 100.0


def test_loss_sweep_lossless_row():
    spec = SweepSpec(loss_base(max_rounds=30), "loss_rate", [0.0])
    (row,) = run_loss_sweep(spec)
    assert row["success_ratio"] == 1.0 and row["failures"] == 0
    assert row["rounds_attempted"] == 30


def test_loss_sweep_flags_oracle_gap(monkeypatch):
    def fake_run(cfg):
        m = RunMetrics(rounds_attempted=10_000, rounds_succeeded=9_000, rounds_failed=1_000,
                       success_ratio=0.9)
        return RunResult(cfg, m, [], [], [])
    monkeypatch.setattr(harness, "run", fake_run)
    spec = SweepSpec(loss_base(), "loss_rate", [0.06])
    with pytest.raises(SweepAssertionError):
        run_loss_sweep(spec)
    assert not math.isnan(run_loss_sweep(spec, check=False)[0]["gap"])


@pytest.mark.parametrize("airtime,data_bytes", [("msgsize", 15), ("wire", 38)])
def test_plateau_with_sync_airtime(airtime, data_bytes):
    # each block of 100 costs 100 data frames plus three 111-byte votes on the
    # broadcast link, so the plateau is B / 8 / (data_bytes + 3 * 111 / 100)
    expected = 1.2e6 / 8 / (data_bytes + 3 * 111 / 100)
    cfg = throughput_base(duration_s=4.0).replace(client_rate=15000 / 3, airtime=airtime)
    assert sim_run(cfg).metrics.throughput == pytest.approx(expected, rel=0.01)
