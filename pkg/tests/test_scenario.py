"""Scenario I/O: config parsing, reports, simulation export, sweep, verify."""

import json

import numpy as np
import pytest

import energyshare as es
from conftest import TABLE1_PATH

MINIMAL = '{"agents": [{"q": 2.0, "c0": -8.0, "a": 1.0}], "lambda_max": 3.0}'


class TestLoadConfig:
    def test_table1_fixture(self, table1_config):
        assert table1_config.market.n == 4
        assert table1_config.cap.lambda_max == 4.0
        assert table1_config.sim.method == "rk4"
        assert table1_config.sim.record_stride == 100
        assert table1_config.seed == 0

    def test_accepts_json_text(self):
        cfg = es.load_config(MINIMAL)
        assert cfg.market.n == 1
        assert cfg.cap.lambda_max == 3.0

    def test_sim_defaults(self):
        sim = es.load_config(MINIMAL).sim
        assert sim.h == 1e-3
        assert sim.t_end == 100.0
        assert sim.method == "euler"
        assert sim.record_stride == 10
        assert sim.init == "zero"

    def test_round_trip_is_byte_identical(self, table1_config):
        text = es.config_to_json(table1_config)
        assert es.config_to_json(es.load_config(text)) == text

    def test_round_trip_with_explicit_init(self):
        init = list(range(8))
        doc = json.loads(MINIMAL)
        doc["sim"] = {"init": [float(v) for v in init]}
        text = json.dumps(doc)
        cfg = es.load_config(text)
        assert isinstance(cfg.sim.init, np.ndarray)
        again = es.config_to_json(es.load_config(es.config_to_json(cfg)))
        assert again == es.config_to_json(cfg)

    def test_zero_curvature_rejected(self):
        with pytest.raises(es.NonpositiveCurvature):
            es.load_config('{"agents": [{"q": 0.0, "c0": -1.0, "a": 1.0}], "lambda_max": 3.0}')

    def test_unknown_agent_key_named(self):
        with pytest.raises(es.ParseError, match="qq"):
            es.load_config(
                '{"agents": [{"qq": 1.0, "c0": -1.0, "a": 1.0}], "lambda_max": 3.0}'
            )

    def test_unknown_top_level_key_named(self):
        with pytest.raises(es.ParseError, match="gamma"):
            es.load_config(
                '{"agents": [{"q": 1.0, "c0": -1.0, "a": 1.0}], "lambda_max": 3.0, "gamma": 1}'
            )

    def test_missing_lambda_max(self):
        with pytest.raises(es.MissingField, match="lambda_max"):
            es.load_config('{"agents": [{"q": 1.0, "c0": -1.0, "a": 1.0}]}')

    def test_missing_agents(self):
        with pytest.raises(es.MissingField, match="agents"):
            es.load_config('{"lambda_max": 3.0}')

    def test_malformed_json_reports_position(self):
        with pytest.raises(es.ParseError, match="line"):
            es.load_config('{"agents": [}')

    def test_missing_file(self, tmp_path):
        with pytest.raises(es.ParseError, match="cannot read"):
            es.load_config(str(tmp_path / "nope.json"))

    def test_bad_method_rejected(self):
        with pytest.raises(es.ParseError, match="method"):
            es.load_config(
                '{"agents": [{"q": 1.0, "c0": -1.0, "a": 1.0}], "lambda_max": 3.0,'
                ' "sim": {"method": "heun"}}'
            )

    def test_wrong_init_length_rejected(self):
        with pytest.raises(es.ParseError, match="5N\\+3"):
            es.load_config(
                '{"agents": [{"q": 1.0, "c0": -1.0, "a": 1.0}], "lambda_max": 3.0,'
                ' "sim": {"init": [0.0, 0.0]}}'
            )

    def test_non_numeric_field_rejected(self):
        with pytest.raises(es.ParseError, match="lambda_max"):
            es.load_config('{"agents": [{"q": 1.0, "c0": -1.0, "a": 1.0}], "lambda_max": "4"}')

    def test_boolean_seed_rejected(self):
        with pytest.raises(es.ParseError, match="seed"):
            es.load_config(
                '{"agents": [{"q": 1.0, "c0": -1.0, "a": 1.0}], "lambda_max": 3.0, "seed": true}'
            )


class TestRunSolve:
    def test_table1_report(self, table1_config):
        rep = es.run_solve(table1_config)
        assert rep.ce.lambda_bar == pytest.approx(8.26, abs=0.01)
        assert rep.sce.lambda_star == 4.0
        np.testing.assert_allclose(rep.sce.u_star, [5.31, 3.54, 0.53, 0.26], atol=0.01)
        assert rep.cap_active
        assert rep.residuals.max_violation() <= 1e-9

    def test_slack_cap_report(self, table1_config):
        from dataclasses import replace

        cfg = replace(table1_config, cap=es.SocialPriceCap(lambda_max=10.0))
        rep = es.run_solve(cfg)
        assert not rep.cap_active
        assert np.all(rep.sce.u_star == 0.0)

    def test_single_agent_hand_values(self):
        cfg = es.load_config('{"agents": [{"q": 1.0, "c0": -10.0, "a": 3.0}], "lambda_max": 5.0}')
        rep = es.run_solve(cfg)
        assert rep.ce.lambda_bar == pytest.approx(7.0, abs=1e-12)
        assert rep.sce.lambda_star == 5.0
        assert rep.sce.nu_star == pytest.approx(2.0, abs=1e-12)

    def test_deterministic_bytes(self, table1_config):
        outs = {es.report_to_json(es.run_solve(table1_config)) for _ in range(3)}
        assert len(outs) == 1

    def test_cap_active_iff_positive_dual_iff_price_above_cap(self):
        rng = np.random.default_rng(32)
        for _ in range(50):
            n = int(rng.integers(1, 5))
            q = rng.uniform(0.5, 10, n)
            c0 = rng.uniform(-50, 0, n)
            a = rng.uniform(0, 20, n)
            market = es.validate_market(list(zip(q, c0, a)))
            cap = float(rng.uniform(-10, 30))
            cfg = es.ScenarioConfig(
                market=market, cap=es.SocialPriceCap(cap), sim=es.SimSettings()
            )
            rep = es.run_solve(cfg)
            lam_ce = es.solve_ce(market).lambda_bar
            assert rep.cap_active == (rep.sce.nu_star > 0) == (lam_ce > cap + 1e-9) or (
                abs(lam_ce - cap) <= 1e-9
            )

    def test_report_json_keys_sorted(self, table1_config):
        text = es.report_to_json(es.run_solve(table1_config))
        doc = json.loads(text)
        assert list(doc) == sorted(doc)
        assert list(doc["sce"]) == sorted(doc["sce"])


class TestRunSimulate:
    def test_table1_fixture_converges(self, table1_config, tmp_path):
        csv_path = tmp_path / "traj.csv"
        summary_path = tmp_path / "traj.summary.json"
        traj, report = es.run_simulate(table1_config, csv_path, summary_path)
        assert report.converged
        assert report.mu_negativity == 0.0

        lines = csv_path.read_text().splitlines()
        header = lines[0].split(",")
        assert header == es.trajectory_header(4)
        assert len(header) == 26  # 5N + 6 for N = 4, including t, V, eq_residual
        final = [float(v) for v in lines[-1].split(",")]
        sce = es.solve_sce(table1_config.market, 4.0)
        assert final[13] == pytest.approx(4.0, abs=1e-3)  # lambda column
        np.testing.assert_allclose(final[14:18], sce.u_star, atol=1e-3)  # u columns
        for line in lines[1:]:
            values = [float(v) for v in line.split(",")]
            assert len(values) == 26
            assert np.isfinite(values).all()

        summary = json.loads(summary_path.read_text())
        assert summary["converged"] is True
        assert summary["final_error"] <= 1e-3

    def test_equilibrium_init_stays_put(self, table1_config, tmp_path):
        from dataclasses import replace

        init = es.assemble_equilibrium(table1_config.market, 4.0).to_vector()
        cfg = replace(
            table1_config,
            sim=es.SimSettings(h=0.01, t_end=1.0, method="euler", record_stride=1, init=init),
        )
        traj, _ = es.run_simulate(cfg, tmp_path / "eq.csv")
        assert np.abs(traj.states - init).max() <= 1e-9

    def test_single_step_two_rows(self, table1_config, tmp_path):
        from dataclasses import replace

        cfg = replace(
            table1_config,
            sim=es.SimSettings(h=1e-3, t_end=1e-3, method="euler", record_stride=1),
        )
        _, _ = es.run_simulate(cfg, tmp_path / "short.csv")
        lines = (tmp_path / "short.csv").read_text().splitlines()
        assert len(lines) == 3  # header + initial + one step

    def test_divergence_flushes_partial_csv(self, tmp_path):
        # One very stiff agent: explicit Euler at this step is unstable.
        cfg = es.load_config(
            '{"agents": [{"q": 100.0, "c0": -50.0, "a": 1.0}], "lambda_max": 0.2,'
            ' "sim": {"h": 0.001, "t_end": 50.0, "method": "euler", "record_stride": 10}}'
        )
        csv_path = tmp_path / "div.csv"
        with pytest.raises(es.NonfiniteState):
            es.run_simulate(cfg, csv_path)
        lines = csv_path.read_text().splitlines()
        assert lines[0] == ",".join(es.trajectory_header(1))
        assert len(lines) > 1


class TestRunSweep:
    def test_table1_cap_grid(self, table1_config):
        rows = es.run_sweep(table1_config, [2.0, 4.0, 6.0, 8.26, 10.0])
        lam_ce = es.solve_ce(table1_config.market).lambda_bar
        np.testing.assert_allclose(
            [r.lambda_star for r in rows], [2.0, 4.0, 6.0, lam_ce, lam_ce], atol=1e-12
        )
        u_norms = [r.u_norm for r in rows]
        assert u_norms[1] == pytest.approx(6.41, abs=0.01)
        assert u_norms[3] == u_norms[4] == 0.0

    def test_inactive_region_rows_identical(self, table1_config):
        rows = es.run_sweep(table1_config, [10.0, 100.0])
        assert rows[0].lambda_star == rows[1].lambda_star
        assert rows[0].nu_star == rows[1].nu_star == 0.0
        assert rows[0].u_norm == rows[1].u_norm == 0.0
        assert rows[0].welfare_loss_nominal == rows[1].welfare_loss_nominal == 0.0

    def test_monotonicity_and_welfare_loss(self, table1_config):
        caps = [1.0, 2.0, 3.0, 5.0, 7.0, 8.0, 9.0, 12.0]
        rows = es.run_sweep(table1_config, caps)
        nus = [r.nu_star for r in rows]
        lams = [r.lambda_star for r in rows]
        lam_ce = es.solve_ce(table1_config.market).lambda_bar
        assert all(nus[i] >= nus[i + 1] for i in range(len(nus) - 1))
        assert all(lams[i] <= lams[i + 1] for i in range(len(lams) - 1))
        assert all(lam <= lam_ce + 1e-12 for lam in lams)
        assert all(r.welfare_loss_nominal >= -1e-9 for r in rows)
        # the binding region loses welfare, strictly more for tighter caps
        assert rows[0].welfare_loss_nominal > rows[3].welfare_loss_nominal > 0.0

    def test_csv_rendering(self, table1_config):
        text = es.sweep_to_csv(es.run_sweep(table1_config, [4.0]))
        lines = text.splitlines()
        assert lines[0].startswith("lambda_max,")
        assert "welfare_loss_nominal_utilities" in lines[0]
        assert len(lines) == 2

    def test_empty_caps_rejected(self, table1_config):
        with pytest.raises(ValueError):
            es.run_sweep(table1_config, [])


class TestSerialization:
    def test_float_round_trip_is_exact(self):
        values = [900.0 / 109.0, 1e-3, 0.1 + 0.2, 5.307912297426121, -0.0, 1e300]
        for v in values:
            doc = json.loads(es.dumps_canonical({"v": v}))
            assert doc["v"] == v

    def test_keys_sorted_recursively(self):
        text = es.dumps_canonical({"b": {"d": 1, "c": 2}, "a": 3})
        assert text.index('"a"') < text.index('"b"')
        assert text.index('"c"') < text.index('"d"')

    def test_csv_floats_round_trip_exactly(self, table1_config, tmp_path):
        from dataclasses import replace

        cfg = replace(
            table1_config,
            sim=es.SimSettings(h=0.01, t_end=0.2, method="rk4", record_stride=1),
        )
        traj, _ = es.run_simulate(cfg, tmp_path / "exact.csv")
        last = (tmp_path / "exact.csv").read_text().splitlines()[-1]
        values = [float(v) for v in last.split(",")]
        assert values[0] == traj.times[-1]
        np.testing.assert_array_equal(values[1:24], traj.final_state)
        assert values[24] == traj.lyapunov[-1]
        assert values[25] == traj.equilibrium_residuals[-1]


class TestRunVerify:
    def test_battery_passes_on_correct_build(self, table1_config):
        report = es.run_verify(table1_config, num_random_instances=120, seed=3)
        failed = [c for c in report.checks if not c.passed]
        assert report.passed, f"failed checks: {[(c.name, c.detail) for c in failed]}"
        assert len(report.checks) >= 20

    def test_seed_reproducibility(self):
        cfg = es.load_config(MINIMAL)
        r1 = es.run_verify(cfg, num_random_instances=25, seed=11)
        r2 = es.run_verify(cfg, num_random_instances=25, seed=11)
        assert [c.detail for c in r1.checks] == [c.detail for c in r2.checks]

    def test_mutated_solver_is_caught(self, monkeypatch):
        cfg = es.load_config(MINIMAL)

        def mutant(market, cap):  # picks the wrong complementarity branch
            lam_ce = es.solve_ce(market).lambda_bar
            return lam_ce if lam_ce >= cap else cap

        monkeypatch.setattr("energyshare.equilibrium.solve_scalar_lcp", mutant)
        report = es.run_verify(cfg, num_random_instances=25, seed=4)
        oracle = {c.name: c for c in report.checks}["equilibrium.oracle_agreement"]
        assert not oracle.passed
        assert not report.passed
