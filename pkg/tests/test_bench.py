import os

import numpy as np
import pytest

from glapmdp import bench, cli, core
from glapmdp.bench import (
    ConfigError,
    build_adversary,
    load_config,
    parse_seeds,
    preset_parameters,
    read_summary,
    regrets_by_seed,
    run_experiment,
    sublinearity_report,
)


def quick_cfg(out, **over):
    base = {
        "mdp.kind": "lowrank", "mdp.S": "4", "mdp.A": "2", "mdp.H": "3",
        "mdp.d": "4", "mdp.seed": "0", "mdp.initial": "uniform",
        "adversary.kind": "drift", "adversary.seed": "1",
        "cover.mode": "random", "cover.budget": "10", "cover.seed": "2",
        "algorithm": "glap", "mode": "simulator",
        "glap.K": "200", "glap.gamma": "0.2", "glap.eps": "0.25",
        "est.redesign_every": "500", "seeds": "0", "out": str(out),
    }
    base.update({k: str(v) for k, v in over.items()})
    return load_config(None, [f"{k}={v}" for k, v in base.items()])


class TestConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            load_config(None, ["mdp.Z=3"])

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ["glap.K=three"])
        with pytest.raises(ConfigError):
            load_config(None, ["glap.bonus_log_pi=perhaps"])

    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("# comment line\nglap.K = 50\nmdp.S=6\n")
        cfg = load_config(path, ["glap.K=75"])
        assert cfg["glap.K"] == 75 and cfg["mdp.S"] == 6

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("glap.K 50\n")
        with pytest.raises(ConfigError, match="key=value"):
            load_config(path)

    def test_parse_seeds(self):
        assert parse_seeds("3,1,2") == [3, 1, 2]
        with pytest.raises(ConfigError):
            parse_seeds("")


class TestAdversaries:
    @pytest.mark.parametrize("kind", ["fixed", "drift", "switching", "randomized"])
    def test_sequences_are_valid(self, small_lowrank, kind):
        adv = build_adversary(small_lowrank, kind, seed=5, omega=1e-3, period=7)
        losses = adv.sequence(40, small_lowrank)
        assert core.validate_losses(losses, small_lowrank).ok

    def test_fixed_constant(self, small_lowrank):
        adv = build_adversary(small_lowrank, "fixed", seed=1)
        assert np.array_equal(adv.theta_at(0), adv.theta_at(17))

    def test_drift_rotates_and_respects_bound_at_any_index(self, small_lowrank):
        adv = build_adversary(small_lowrank, "drift", seed=1, omega=0.01)
        assert not np.allclose(adv.theta_at(0), adv.theta_at(50))
        for k in (-500, -1, 0, 1234):
            inner = np.einsum("sad,hd->hsa", small_lowrank.features, adv.theta_at(k))
            assert np.abs(inner).max() <= 1.0 + 1e-9
            norms = np.linalg.norm(adv.theta_at(k), axis=1)
            assert norms.max() <= 2.0 + 1e-9  # sqrt(d) = 2

    def test_switching_period(self, small_lowrank):
        adv = build_adversary(small_lowrank, "switching", seed=2, period=5)
        assert np.array_equal(adv.theta_at(0), adv.theta_at(4))
        assert not np.allclose(adv.theta_at(0), adv.theta_at(5))

    def test_randomized_deterministic_per_index(self, small_lowrank):
        adv = build_adversary(small_lowrank, "randomized", seed=3)
        a = adv.theta_at(7)
        b = adv.theta_at(7)
        assert np.array_equal(a, b)
        assert not np.allclose(adv.theta_at(7), adv.theta_at(8))

    def test_magnitude_scales_losses(self, small_lowrank):
        lo = build_adversary(small_lowrank, "fixed", seed=1, magnitude=0.5)
        inner = np.einsum("sad,hd->hsa", small_lowrank.features, lo.theta_at(0))
        assert np.abs(inner).max() <= 0.5 + 1e-9


class TestPresets:
    def test_simulator_formulas(self):
        eps, gamma = preset_parameters("simulator", 10_000, 4, 3, 30, 0.05)
        logk = np.log(10_000 / 0.05)
        assert eps == pytest.approx(4 * 9 * logk / 10_000)
        assert gamma == pytest.approx(np.sqrt(4 * 3 * np.log(30 / 0.05) / 10_000))

    def test_clamped_at_small_k(self):
        eps, gamma = preset_parameters("live", 100, 4, 3, 30, 0.05)
        assert eps == 0.5 and gamma == 0.5

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset_parameters("magic", 100, 4, 3, 30, 0.05)


class TestRunExperiment:
    def test_best_fixed_oracle_has_zero_regret(self, tmp_path):
        cfg = quick_cfg(tmp_path / "o", algorithm="best_fixed_oracle")
        rows = run_experiment(cfg)
        assert rows[0]["status"] == "ok"
        assert rows[0]["final_regret"] == 0.0

    def test_uniform_regret_matches_expected_slope(self, tmp_path):
        K = 3000
        cfg = quick_cfg(tmp_path / "u", algorithm="uniform", **{"glap.K": K},
                        seeds="0,1,2,3")
        rows = run_experiment(cfg)
        mdp, cover, policies, adv = bench.build_instance(cfg)
        losses = adv.sequence(K, mdp)
        from glapmdp.glap import exact_value_matrix
        values = exact_value_matrix(mdp, policies, losses)
        tot = values.sum(axis=0)
        expected = (tot.mean() - tot.min())
        got = np.mean([r["final_regret"] for r in rows])
        assert got == pytest.approx(expected, rel=0.25)

    def test_deterministic_outputs(self, tmp_path):
        blobs = []
        for name in ("a", "b"):
            cfg = quick_cfg(tmp_path / name, seeds="0,1")
            run_experiment(cfg)
            blobs.append(tuple(
                (tmp_path / name / f).read_bytes()
                for f in ("trace_seed0.csv", "trace_seed1.csv", "summary.csv")))
        assert blobs[0] == blobs[1]

    def test_failed_seed_recorded_and_others_proceed(self, tmp_path):
        cfg = quick_cfg(tmp_path / "f", seeds="0,1", **{"est.budget": 40})
        rows = run_experiment(cfg)
        assert [r["status"] for r in rows] == ["failed", "failed"]
        assert "CollectionBudgetError" in rows[0]["error"]
        summary = (tmp_path / "f" / "summary.csv").read_text()
        assert "failed" in summary

    def test_horizon_one_needs_no_oracle(self, tmp_path):
        cfg = quick_cfg(tmp_path / "h1", **{"mdp.H": 1, "glap.K": 100})
        rows = run_experiment(cfg)
        assert rows[0]["status"] == "ok"
        assert rows[0]["oracle_episodes"] == 0

    def test_live_mode_pessimistic_accounting(self, tmp_path):
        cfg = quick_cfg(tmp_path / "live", mode="live",
                        **{"live.charge": "pessimistic", "glap.K": 100})
        rows = run_experiment(cfg)
        row = rows[0]
        assert row["status"] == "ok"
        assert row["estimation_charge"] == pytest.approx(
            row["estimation_episodes"] * 3)  # H = 3 per-episode pessimistic bound
        # regret trace starts from the estimation charge
        trace = (tmp_path / "live" / "trace_seed0.csv").read_text().splitlines()
        first = float(trace[1].split(",")[4])
        assert first >= row["estimation_charge"] - 3.0

    def test_live_mode_realized_charge_bounded(self, tmp_path):
        cfg = quick_cfg(tmp_path / "live2", mode="live", **{"glap.K": 100})
        rows = run_experiment(cfg)
        row = rows[0]
        assert row["status"] == "ok"
        assert abs(row["estimation_charge"]) <= row["estimation_episodes"] * 3

    def test_modes_share_bandit_phase_losses(self, small_lowrank):
        adv = build_adversary(small_lowrank, "drift", seed=1, omega=1e-3)
        seq = adv.sequence(10, small_lowrank)
        for k in range(10):
            assert np.array_equal(seq.theta[k], adv.theta_at(k))

    def test_estimated_features_never_beat_exact_in_median(self, tmp_path):
        seeds = "0,1,2,3,4,5,6,7,8,9"
        regs = {}
        for name, algo, eps in (("exact", "exp3_exact_features", 0.3),
                                ("est", "glap", 0.3)):
            cfg = quick_cfg(tmp_path / name, algorithm=algo, seeds=seeds,
                            **{"glap.K": 2000, "glap.gamma": 0.15,
                               "glap.eps": eps, "cover.budget": 20})
            rows = run_experiment(cfg, jobs=2)
            assert all(r["status"] == "ok" for r in rows)
            regs[name] = np.median([r["final_regret"] for r in rows])
        assert regs["exact"] <= regs["est"] * 1.05


class TestReports:
    def test_sublinearity_linear_baseline(self):
        rep = sublinearity_report({0: 100.0, 1: 110.0}, {0: 200.0, 1: 220.0},
                                  threshold=0.95)
        assert rep.median_alpha == pytest.approx(1.0)
        assert not rep.passed

    def test_sublinearity_excludes_nonpositive(self):
        rep = sublinearity_report({0: 0.0, 1: 100.0}, {0: 10.0, 1: 150.0})
        assert rep.excluded == 1
        assert list(rep.alphas) == [1]
        assert rep.passed  # alpha = log(1.5)/log(2) = 0.58

    def test_query_complexity_ratio(self):
        rep = bench.QueryComplexityReport(40_000, 200)
        assert rep.ratio_to_k_squared == pytest.approx(1.0)

    def test_read_summary_round_trip(self, tmp_path):
        cfg = quick_cfg(tmp_path / "rt", seeds="0,1")
        rows = run_experiment(cfg)
        loaded = read_summary(tmp_path / "rt" / "summary.csv")
        got = regrets_by_seed(loaded)
        assert set(got) == {0, 1}
        for r in rows:
            assert got[r["seed"]] == pytest.approx(r["final_regret"])


class TestCli:
    def test_full_cli_pipeline(self, tmp_path):
        mdp_path = str(tmp_path / "mdp.json")
        loss_path = str(tmp_path / "losses.json")
        cover_path = str(tmp_path / "cover.json")
        table_path = str(tmp_path / "table.json")
        assert cli.main(["gen-mdp", "--out", mdp_path, "--kind", "tabular",
                         "--S", "4", "--A", "2", "--H", "3", "--d", "8",
                         "--seed", "0", "--initial", "uniform"]) == 0
        assert cli.main(["gen-losses", "--mdp", mdp_path, "--out", loss_path,
                         "--kind", "drift", "--K", "50"]) == 0
        assert cli.main(["build-cover", "--out", cover_path, "--d", "8",
                         "--H", "3", "--budget", "8"]) == 0
        assert cli.main(["estimate-features", "--mdp", mdp_path, "--cover",
                         cover_path, "--out", table_path, "--eps", "0.3",
                         "--delta", "0.1", "--redesign-every", "1000"]) == 0
        out = str(tmp_path / "run")
        assert cli.main(["run", "--config", "/dev/null",
                         "mdp.file=" + mdp_path, "cover.file=" + cover_path,
                         "glap.K=100", "glap.gamma=0.2", "glap.eps=0.3",
                         "est.redesign_every=1000", "seeds=0",
                         "out=" + out]) == 0
        assert os.path.exists(os.path.join(out, "summary.csv"))

    def test_run_exit_code_on_failure(self, tmp_path):
        out = str(tmp_path / "bad")
        code = cli.main(["run", "--config", "/dev/null", "mdp.initial=uniform",
                         "est.budget=40", "glap.K=50", "glap.gamma=0.2",
                         "seeds=0", "out=" + out])
        assert code == 1

    def test_report_sublinearity(self, tmp_path):
        for K, name in ((100, "k"), (200, "k2")):
            cfg = quick_cfg(tmp_path / name, algorithm="uniform",
                            **{"glap.K": K}, seeds="0,1,2")
            run_experiment(cfg)
        out = str(tmp_path / "rep.json")
        code = cli.main(["report", "sublinearity",
                         "--summary-k", str(tmp_path / "k" / "summary.csv"),
                         "--summary-2k", str(tmp_path / "k2" / "summary.csv"),
                         "--out", out])
        assert code == 0 and os.path.exists(out)

    def test_report_query_complexity(self, tmp_path):
        cfg = quick_cfg(tmp_path / "qc")
        run_experiment(cfg)
        code = cli.main(["report", "query-complexity",
                         "--summary-k", str(tmp_path / "qc" / "summary.csv")])
        assert code == 0

    def test_unknown_config_key_exits_nonzero(self, tmp_path):
        code = cli.main(["run", "--config", "/dev/null", "bogus.key=1",
                         "out=" + str(tmp_path / "x")])
        assert code == 2
