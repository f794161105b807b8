import json

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from conftest import RICH_MIX
from timealloc import ingest, synth
from timealloc.cli import main


@pytest.fixture
def runner():
    return CliRunner()


def synth_config(tmp_path, theta, n=300, seed=5, noise=None, alloc_seed=3):
    cfg = {
        "population": dict(n=n, seed=seed, **{k: list(v) for k, v in RICH_MIX.items()}),
        "theta_star": np.asarray(theta).tolist(),
        "noise": noise or {"kind": "none"},
        "allocation_seed": alloc_seed,
    }
    path = tmp_path / "synth_config.json"
    path.write_text(json.dumps(cfg))
    return path


def run_ok(runner, args):
    result = runner.invoke(main, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


class TestSynthFit:
    def test_synth_then_fit_recovers_truth(self, runner, tmp_path, dense_theta):
        cfg = synth_config(tmp_path, dense_theta)
        sdir = tmp_path / "s"
        run_ok(runner, ["synth", "--config", str(cfg), "--out-dir", str(sdir)])
        assert (sdir / "synthetic.csv").exists()
        assert (sdir / "metadata.json").exists()
        assert (sdir / "run_config.json").exists()

        fdir = tmp_path / "f"
        result = run_ok(
            runner,
            [
                "fit",
                "--data",
                str(sdir / "synthetic.csv"),
                "--out-dir",
                str(fdir),
                "--ols",
                "--truth",
                str(sdir / "metadata.json"),
            ],
        )
        assert "mad_vs_truth" in result.output
        mad = float(result.output.split("mad_vs_truth=")[1].split()[0])
        assert mad < 1e-6
        assert (fdir / "fit_structural.json").exists()
        assert (fdir / "fit_ols.json").exists()

    def test_fit_bootstrap_output(self, runner, tmp_path, dense_theta):
        cfg = synth_config(tmp_path, dense_theta, n=150)
        sdir, fdir = tmp_path / "s", tmp_path / "f"
        run_ok(runner, ["synth", "--config", str(cfg), "--out-dir", str(sdir)])
        run_ok(
            runner,
            ["fit", "--data", str(sdir / "synthetic.csv"), "--out-dir", str(fdir),
             "--bootstrap", "100", "--seed", "4"],
        )
        boot = json.loads((fdir / "bootstrap_ci.json").read_text())
        assert boot["kind"] == "bootstrap_ci"
        assert boot["n_replicates"] == 100
        lo = np.asarray(boot["ci_low"])
        hi = np.asarray(boot["ci_high"])
        assert lo.shape == (3, 11)
        assert (lo <= hi).all()

    def test_synth_reruns_byte_identical(self, runner, tmp_path, dense_theta):
        cfg = synth_config(tmp_path, dense_theta, n=50)
        d1, d2 = tmp_path / "a", tmp_path / "b"
        run_ok(runner, ["synth", "--config", str(cfg), "--out-dir", str(d1)])
        run_ok(runner, ["synth", "--config", str(cfg), "--out-dir", str(d2)])
        assert (d1 / "synthetic.csv").read_bytes() == (d2 / "synthetic.csv").read_bytes()


class TestIngestCommand:
    def make_raw(self, path, n=40):
        rng = np.random.default_rng(0)
        rows = []
        for i in range(n):
            minutes = rng.dirichlet(np.ones(4)) * 1440.0
            rows.append(
                {
                    "CASEID": f"c{i}",
                    "SEX": int(rng.integers(1, 3)),
                    "RACE": int(rng.choice([100, 110, 120, 131, 132])),
                    "EARNWEEK": round(float(rng.lognormal(6, 1)), 2),
                    "EDUCYRS": int(rng.choice([110, 214, 217, 316])),
                    "SPOUSEPRES": int(rng.choice([1, 2, 3])),
                    "AGE": int(rng.integers(18, 80)),
                    "minutes_leisure": minutes[0],
                    "minutes_work": minutes[1],
                    "minutes_sleep": minutes[2],
                    "minutes_other": minutes[3],
                }
            )
        # one bad row per rejection family
        rows.append(dict(rows[0], CASEID="bad-sex", SEX=99))
        rows.append(dict(rows[0], CASEID="bad-race", RACE=250))
        rows.append(dict(rows[0], CASEID="bad-earn", EARNWEEK=99999.99))
        pd.DataFrame(rows).to_csv(path, index=False)
        return n + 3

    def test_ingest_outputs_and_funnel(self, runner, tmp_path):
        raw_path = tmp_path / "raw.csv"
        total = self.make_raw(raw_path)
        out = tmp_path / "out"
        result = run_ok(runner, ["ingest", "--input", str(raw_path), "--out-dir", str(out)])
        funnel = json.loads(result.output.strip().splitlines()[-1])
        assert funnel["raw"] == total
        accounted = funnel["accepted"] + sum(
            v for k, v in funnel.items() if k not in ("raw", "accepted")
        )
        assert accounted == total
        clean = ingest.load_clean_csv(out / "clean.csv")
        assert len(clean) == funnel["accepted"]
        assert (out / "rejections.csv").exists()
        assert (out / "standardization.json").exists()
        assert (out / "summary.csv").exists()

    def test_header_map_flag(self, runner, tmp_path):
        raw_path = tmp_path / "raw.csv"
        self.make_raw(raw_path, n=30)
        df = pd.read_csv(raw_path).rename(columns={"SEX": "GENDER"})
        df.to_csv(raw_path, index=False)
        map_path = tmp_path / "map.json"
        map_path.write_text(json.dumps({"sex": "GENDER"}))
        out = tmp_path / "out"
        run_ok(
            runner,
            ["ingest", "--input", str(raw_path), "--out-dir", str(out),
             "--header-map", str(map_path)],
        )
        assert (out / "clean.csv").exists()

    def test_data_error_exit_code(self, runner, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("nope\n1\n")
        result = runner.invoke(
            main, ["ingest", "--input", str(bad), "--out-dir", str(tmp_path / "o")]
        )
        assert result.exit_code == 2

    def test_usage_error_exit_code(self, runner, tmp_path):
        result = runner.invoke(
            main, ["ingest", "--input", str(tmp_path / "missing.csv"), "--out-dir", "x"]
        )
        assert result.exit_code == 1


class TestAgentsCommand:
    def test_mock_agent_run(self, runner, tmp_path, dense_theta):
        cfg = synth_config(tmp_path, dense_theta, n=40)
        sdir = tmp_path / "s"
        run_ok(runner, ["synth", "--config", str(cfg), "--out-dir", str(sdir)])
        agent_cfg = tmp_path / "agent.json"
        agent_cfg.write_text(
            json.dumps({"mock": {"theta": dense_theta.tolist(), "noise": "none", "seed": 1}})
        )
        adir = tmp_path / "a"
        run_ok(
            runner,
            [
                "agents",
                "run",
                "--data",
                str(sdir / "synthetic.csv"),
                "--agent-config",
                str(agent_cfg),
                "--out-dir",
                str(adir),
            ],
        )
        decisions = ingest.load_clean_csv(adir / "decisions.csv")
        assert len(decisions) == 40
        assert (adir / "index.csv").exists()
        assert (adir / "attrition.csv").exists()

    def test_transport_error_exit_code(self, runner, tmp_path, dense_theta):
        cfg = synth_config(tmp_path, dense_theta, n=25)
        sdir = tmp_path / "s"
        run_ok(runner, ["synth", "--config", str(cfg), "--out-dir", str(sdir)])
        agent_cfg = tmp_path / "agent.json"
        agent_cfg.write_text(
            json.dumps(
                {
                    "endpoint": "http://127.0.0.1:1/never",
                    "model": "m",
                    "max_retries": 0,
                    "timeout": 0.2,
                    "concurrency": 1,
                }
            )
        )
        result = runner.invoke(
            main,
            [
                "agents",
                "run",
                "--data",
                str(sdir / "synthetic.csv"),
                "--agent-config",
                str(agent_cfg),
                "--out-dir",
                str(tmp_path / "a"),
            ],
        )
        assert result.exit_code == 4


class TestCompareCommand:
    def test_self_comparison(self, runner, tmp_path, dense_theta):
        cfg = synth_config(tmp_path, dense_theta, n=200)
        sdir, fdir = tmp_path / "s", tmp_path / "f"
        run_ok(runner, ["synth", "--config", str(cfg), "--out-dir", str(sdir)])
        run_ok(runner, ["fit", "--data", str(sdir / "synthetic.csv"), "--out-dir", str(fdir)])
        cdir = tmp_path / "c"
        result = run_ok(
            runner,
            [
                "compare",
                "--human",
                str(fdir / "fit_structural.json"),
                "--model",
                f"self={fdir / 'fit_structural.json'}",
                "--out-dir",
                str(cdir),
            ],
        )
        divergence = json.loads(result.output.strip().splitlines()[-1])
        assert divergence["self"] == 0.0
        report = json.loads((cdir / "alignment_report.json").read_text())
        for cos in report["activity_cosine"]["self"].values():
            assert cos == pytest.approx(1.0)
        for name in (
            "activity_cosine",
            "model_divergence",
            "deviations",
            "attribute_ranking",
            "feature_cosine",
            "worst_alignment",
        ):
            assert (cdir / f"{name}.csv").exists()


class TestCompareUsage:
    def test_malformed_model_spec_is_usage_error(self, runner, tmp_path, dense_theta):
        cfg = synth_config(tmp_path, dense_theta, n=150)
        sdir, fdir = tmp_path / "s", tmp_path / "f"
        run_ok(runner, ["synth", "--config", str(cfg), "--out-dir", str(sdir)])
        run_ok(runner, ["fit", "--data", str(sdir / "synthetic.csv"), "--out-dir", str(fdir)])
        result = runner.invoke(
            main,
            ["compare", "--human", str(fdir / "fit_structural.json"),
             "--model", "not-a-label-path-pair", "--out-dir", str(tmp_path / "c")],
        )
        assert result.exit_code == 1


class TestShiftTestCommand:
    def test_zero_magnitude_specs(self, runner, tmp_path, dense_theta):
        cfg = synth_config(tmp_path, dense_theta, n=250)
        sdir = tmp_path / "s"
        run_ok(runner, ["synth", "--config", str(cfg), "--out-dir", str(sdir)])
        specs = [
            {"kind": "earnings_quantile_lift", "magnitude": 0.0},
            {"kind": "age_band_shift", "p": 0.0},
            {"kind": "race_mix", "asian_pp": 0.0, "white_pp": 0.0},
            {"kind": "spouse_mix", "spouse_pp": 0.0, "baseline_pp": 0.0},
        ]
        spec_path = tmp_path / "specs.json"
        spec_path.write_text(json.dumps(specs))
        out = tmp_path / "drift"
        run_ok(
            runner,
            [
                "shift-test",
                "--data",
                str(sdir / "synthetic.csv"),
                "--out-dir",
                str(out),
                "--spec-file",
                str(spec_path),
            ],
        )
        table = pd.read_csv(out / "drift_reports.csv")
        assert len(table) == 8
        assert (table[["mad", "rel_l2", "one_minus_cos"]].abs() < 1e-9).all().all()
        # the long-form CSV parses back into the module type losslessly
        from timealloc.shifts import DriftReport

        reports = [DriftReport(**row) for row in table.to_dict("records")]
        assert {(r.shift, r.estimator) for r in reports} == {
            (s["kind"], e) for s in specs for e in ("structural", "ols")
        }
        for kind in (s["kind"] for s in specs):
            assert (out / f"shifted_{kind}.csv").exists()
            assert (out / f"shifted_{kind}.provenance.json").exists()

    def test_default_shifts_table_layout(self, runner, tmp_path, dense_theta):
        cfg = synth_config(tmp_path, dense_theta, n=250)
        sdir = tmp_path / "s"
        run_ok(runner, ["synth", "--config", str(cfg), "--out-dir", str(sdir)])
        out = tmp_path / "drift"
        run_ok(
            runner,
            ["shift-test", "--data", str(sdir / "synthetic.csv"), "--out-dir", str(out),
             "--seed", "11"],
        )
        wide = pd.read_csv(out / "drift_table.csv")
        assert list(wide["shift"]) == list(
            ("earnings_quantile_lift", "age_band_shift", "race_mix", "spouse_mix")
        )
        assert {"mad_structural", "mad_ols"}.issubset(wide.columns)


class TestRagCommands:
    def test_rag_run_and_compare(self, runner, tmp_path, dense_theta):
        from timealloc.rag import default_kb_path

        cfg = synth_config(tmp_path, dense_theta, n=60)
        sdir = tmp_path / "s"
        run_ok(runner, ["synth", "--config", str(cfg), "--out-dir", str(sdir)])

        shifted = dense_theta.copy()
        shifted[:, 7] *= -1
        agent_cfg = tmp_path / "agent.json"
        agent_cfg.write_text(
            json.dumps(
                {
                    "mock": {
                        "theta": shifted.tolist(),
                        "noise": "none",
                        "seed": 2,
                        "rag_theta": dense_theta.tolist(),
                    }
                }
            )
        )
        rdir = tmp_path / "r"
        run_ok(
            runner,
            [
                "rag",
                "run",
                "--data",
                str(sdir / "synthetic.csv"),
                "--kb",
                default_kb_path("race"),
                "--agent-config",
                str(agent_cfg),
                "--out-dir",
                str(rdir),
            ],
        )
        assert (rdir / "decisions.csv").exists()

        # fits for compare: human truth, pre (mock without rag), post (rag run)
        fdir_h = tmp_path / "fh"
        run_ok(runner, ["fit", "--data", str(sdir / "synthetic.csv"), "--out-dir", str(fdir_h)])
        adir = tmp_path / "a"
        agent_cfg2 = tmp_path / "agent2.json"
        agent_cfg2.write_text(
            json.dumps({"mock": {"theta": shifted.tolist(), "noise": "none", "seed": 2}})
        )
        run_ok(
            runner,
            ["agents", "run", "--data", str(sdir / "synthetic.csv"),
             "--agent-config", str(agent_cfg2), "--out-dir", str(adir)],
        )
        fdir_pre = tmp_path / "fpre"
        run_ok(runner, ["fit", "--data", str(adir / "decisions.csv"), "--out-dir", str(fdir_pre)])
        fdir_post = tmp_path / "fpost"
        run_ok(runner, ["fit", "--data", str(rdir / "decisions.csv"), "--out-dir", str(fdir_post)])

        out = tmp_path / "ragcmp"
        result = run_ok(
            runner,
            [
                "rag",
                "compare",
                "--human",
                str(fdir_h / "fit_structural.json"),
                "--pre",
                str(fdir_pre / "fit_structural.json"),
                "--post",
                str(fdir_post / "fit_structural.json"),
                "--features",
                "race_black",
                "--out-dir",
                str(out),
            ],
        )
        table = pd.read_csv(out / "rag_compare.csv")
        row = table.set_index("feature").loc["race_black"]
        assert row["cosine_post"] > row["cosine_pre"]


class TestReportCommand:
    def test_report_renders_svgs(self, runner, tmp_path, dense_theta):
        cfg = synth_config(tmp_path, dense_theta, n=200)
        sdir, fdir, cdir = tmp_path / "s", tmp_path / "f", tmp_path / "c"
        run_ok(runner, ["synth", "--config", str(cfg), "--out-dir", str(sdir)])
        run_ok(runner, ["fit", "--data", str(sdir / "synthetic.csv"), "--out-dir", str(fdir)])
        run_ok(
            runner,
            ["compare", "--human", str(fdir / "fit_structural.json"),
             "--model", f"self={fdir / 'fit_structural.json'}", "--out-dir", str(cdir)],
        )
        rep = tmp_path / "rep"
        run_ok(runner, ["report", "--in-dir", str(cdir), "--out-dir", str(rep)])
        assert (rep / "summary.md").exists()
        svg_text = (rep / "activity_cosine.svg").read_text()
        assert svg_text.startswith("<svg")

    def test_report_renders_drift_bars(self, runner, tmp_path, dense_theta):
        cfg = synth_config(tmp_path, dense_theta, n=250)
        sdir, ddir = tmp_path / "s", tmp_path / "d"
        run_ok(runner, ["synth", "--config", str(cfg), "--out-dir", str(sdir)])
        run_ok(
            runner,
            ["shift-test", "--data", str(sdir / "synthetic.csv"), "--out-dir", str(ddir)],
        )
        rep = tmp_path / "rep"
        run_ok(runner, ["report", "--in-dir", str(ddir), "--out-dir", str(rep)])
        for metric in ("mad", "rel_l2", "one_minus_cos"):
            assert (rep / f"drift_{metric}.svg").exists()
        assert "Shift invariance" in (rep / "summary.md").read_text()

    def test_report_empty_dir_is_data_error(self, runner, tmp_path):
        result = runner.invoke(
            main, ["report", "--in-dir", str(tmp_path), "--out-dir", str(tmp_path / "o")]
        )
        assert result.exit_code == 2


class TestFitRoundTrip:
    def test_fit_rerun_byte_identical(self, runner, tmp_path, dense_theta):
        cfg = synth_config(tmp_path, dense_theta, n=150)
        sdir = tmp_path / "s"
        run_ok(runner, ["synth", "--config", str(cfg), "--out-dir", str(sdir)])
        f1, f2 = tmp_path / "f1", tmp_path / "f2"
        for fdir in (f1, f2):
            run_ok(runner, ["fit", "--data", str(sdir / "synthetic.csv"), "--out-dir", str(fdir)])
        assert (f1 / "fit_structural.json").read_bytes() == (
            f2 / "fit_structural.json"
        ).read_bytes()
