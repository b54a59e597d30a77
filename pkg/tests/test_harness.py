from __future__ import annotations

import math

import numpy as np
import pytest

from stfs_auction import harness, mechanisms
from stfs_auction.errors import AuctionError, ValidationError
from stfs_auction.mechanisms import AuctionInstance

SMALL = dict(replications=30, calibration_replications=2000)


def _outcome(indicator, payments):
    C = np.asarray(indicator, dtype=np.int8)
    pay = np.asarray(payments, dtype=float)
    return mechanisms.AuctionOutcome(C, pay, np.zeros(C.shape[0]), float(pay.sum()))


class TestSpec:
    @pytest.mark.parametrize("kw", [dict(K_values=()), dict(mechanisms=()), dict(replications=0),
                                    dict(zeta_values=(-4.0,)), dict(mechanisms=("dutch",))])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            harness.SweepSpec(**kw)

    def test_config_mapping(self):
        cfg = {"master_seed": 3, "replications": 12,
               "grid": {"K_values": [3, 4], "N_values": [2], "zeta_values": [0, 4],
                        "mechanisms": ["vcg", "msaa"]},
               "valuation": {"sigma": 2.0}, "msaa": {"epsilon": 0.05}}
        spec = harness.spec_from_mapping(cfg)
        assert spec.K_values == (3, 4) and spec.zeta_values == (0.0, 4.0)
        assert spec.valuation.sigma == 2.0 and spec.msaa.epsilon == 0.05
        with pytest.raises(ValidationError):
            harness.spec_from_mapping({"grid": {"Kvalues": [3]}})

    def test_load_config_errors(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("replications = [\n")
        with pytest.raises(ValidationError):
            harness.load_config(bad)
        with pytest.raises(ValidationError):
            harness.load_config(tmp_path / "missing.toml")


class TestMetrics:
    def test_fairness_top_priority(self):
        o = _outcome([[1], [0], [0]], [0.5, 0, 0])
        assert harness.fairness_factor(o, [0.9, 0.3, 0.1]) == 1.0

    def test_fairness_ratio(self):
        o = _outcome([[0], [1]], [0, 0.1])
        assert harness.fairness_factor(o, [0.9, 0.1]) == pytest.approx(0.1 / 0.9)

    def test_fairness_no_winners(self):
        o = _outcome([[0], [0]], [0, 0])
        assert harness.fairness_factor(o, [0.9, 0.1]) == 1.0

    def test_power_gain_zero_payments(self):
        o = _outcome([[1, 0], [0, 1]], [0, 0])
        assert harness.power_gain(o, np.ones((2, 2)), [1.0, 2.0], reference=3.0) == 1.0
        assert harness.power_gain(o, np.ones((2, 2)), [1.0, 2.0]) == 1.0

    def test_power_gain_identical_outcomes(self):
        o1 = _outcome([[1], [0]], [0.6, 0])
        o2 = _outcome([[1], [0]], [0.6, 0])
        ref = 1.2
        assert harness.power_gain(o1, np.ones((2, 1)), [2.0, 1.0], ref) == \
            harness.power_gain(o2, np.ones((2, 1)), [2.0, 1.0], ref) == pytest.approx(0.75)

    def test_power_proxy_zero_gain_flagged(self):
        o = _outcome([[1, 0], [0, 1]], [0.4, 0.8])
        proxy, flagged = harness.power_proxy(o, [0.0, 2.0])
        assert proxy == pytest.approx(0.4) and flagged == 1


class TestCalibration:
    def test_bridge_shape(self):
        from stfs_auction.valuation import ValuationParams
        br = harness.calibrate_bridge(ValuationParams(), 5, 3, 5000, seed=1)
        assert len(br.knots) == 3
        v = np.linspace(0, 5, 50)
        for n in range(3):
            b = br(n, v)
            assert np.all(b <= v) and np.all(np.diff(b) >= 0)

    def test_single_bidder_slot_pays_nothing(self):
        from stfs_auction.valuation import ValuationParams
        br = harness.calibrate_bridge(ValuationParams(), 2, 3, 2000, seed=1)
        assert np.all(br(1, np.array([0.5, 2.0])) == 0)  # last bidder standing
        assert np.all(br(2, np.array([0.5, 2.0])) == 0)  # no bidder left at all


class TestSweep:
    def test_deterministic_single_cell(self):
        spec = harness.SweepSpec(K_values=(2,), N_values=(1,), zeta_values=(0.0,),
                                 mechanisms=("FPSB",), replications=10, master_seed=5,
                                 calibration_replications=500)
        a, b = harness.run_sweep(spec), harness.run_sweep(spec)
        assert a.rows == b.rows

    def test_threads_do_not_change_results(self):
        spec = harness.SweepSpec(K_values=(3, 5), N_values=(2,), zeta_values=(0.0, 4.0),
                                 master_seed=2, **SMALL)
        assert harness.run_sweep(spec).rows == harness.run_sweep(spec, threads=3).rows

    def test_metrics_normalised(self):
        spec = harness.SweepSpec(K_values=(3, 6), N_values=(2, 4), zeta_values=(0.0, 4.0),
                                 master_seed=1, **SMALL)
        res = harness.run_sweep(spec)
        assert len(res.rows) == 2 * 2 * 2 * 4 and not res.failed
        for r in res.rows:
            for name in ("S_mean", "R_mean", "P_G_mean", "eta_H_mean"):
                assert 0.0 <= getattr(r, name) <= 1.0
        assert max(r.S_mean for r in res.rows) == 1.0

    def test_shared_draws_across_mechanisms(self):
        # a single slot with truthful reports: VCG and SPSB are the same auction
        spec = harness.SweepSpec(K_values=(4,), N_values=(1,), mechanisms=("SPSB", "VCG"),
                                 master_seed=3, **SMALL)
        res = harness.run_sweep(spec)
        assert res.row("SPSB", 4, 1).surplus_raw == res.row("VCG", 4, 1).surplus_raw

    def test_failed_cell_recorded(self, monkeypatch):
        real = mechanisms.run_mechanism

        def flaky(mech, inst, *a, **kw):
            if mech is mechanisms.Mechanism.VCG:
                raise AuctionError("boom")
            return real(mech, inst, *a, **kw)

        monkeypatch.setattr(harness.mechanisms, "run_mechanism", flaky)
        spec = harness.SweepSpec(K_values=(3,), N_values=(2,), master_seed=1, **SMALL)
        res = harness.run_sweep(spec)
        bad = res.row("VCG", 3, 2)
        assert bad.status == "failed" and "boom" in bad.error and math.isnan(bad.S_mean)
        assert res.row("SPSB", 3, 2).status == "ok"

    def test_affinity_range(self):
        from stfs_auction.valuation import ValuationParams
        V, v_h, v_g = harness.draw_values(ValuationParams(), 4, 3, 500, seed=1)
        v = ValuationParams().alpha * v_h + v_g
        ratio = V / v[:, None, :]
        assert ratio.min() > 0.5 and ratio.max() <= 1.0


class TestExport:
    def test_empty_result_header_only(self, tmp_path):
        harness.export(harness.SweepResult(None, []), tmp_path, figures=False)
        text = (tmp_path / "sweep.csv").read_text()
        assert text == ",".join(harness.COLUMNS) + "\n"

    def test_round_trip(self, tmp_path):
        spec = harness.SweepSpec(K_values=(3,), N_values=(2,), mechanisms=("SPSB", "VCG"),
                                 master_seed=4, **SMALL)
        res = harness.run_sweep(spec)
        assert len(res.rows) == 2
        harness.export(res, tmp_path)
        back = harness.read_table(tmp_path / "sweep.csv")
        assert back.rows == res.rows

    def test_fig8_schema(self, tmp_path):
        spec = harness.SweepSpec(K_values=(6,), N_values=(4, 6), master_seed=4, **SMALL)
        harness.export(harness.run_sweep(spec), tmp_path)
        header = (tmp_path / "fig8.csv").read_text().splitlines()[0]
        assert header == "mechanism,zeta,N,P_G_mean,P_G_se"
        for name in harness.FIGURES:
            assert (tmp_path / f"{name}.csv").exists()

    def test_io_error_has_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            harness.export(harness.SweepResult(None, []), blocker)


def test_vcg_single_slot_matches_spsb():
    rng = np.random.default_rng(0)
    for _ in range(50):
        v = rng.random(5)
        a = mechanisms.run_vcg(AuctionInstance(v))
        b = mechanisms.run_spsb(AuctionInstance(v), v)
        assert a.payments.tolist() == b.payments.tolist()
