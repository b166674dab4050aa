"""Experiment plans, threaded orchestration, and reproducible outputs."""

import dataclasses
import json

import pytest

from mcmcdegen.harness import (
    ExperimentPlan,
    RunManifest,
    default_theta0,
    make_plan,
    orchestrate,
)
from mcmcdegen.metrics import DiagnosticsReport, one_step_statistic
from mcmcdegen.model import ModelConfig, Theta
from mcmcdegen.sampling import RngStream

_SMALL_DIAG = dict(
    n_list=(60,), m=5, R=2,
    options={"inner": 4, "starts": 2, "bank_size": 128, "pool": 1024},
)


class TestPlans:
    def test_scenario_defaults(self):
        plan = make_plan("fig1")
        assert plan.n_list == (100, 1000)
        assert plan.variants == ("binary-null", "binary-beta")
        assert plan.m == 200
        table = make_plan("table1")
        assert table.n_list == (100, 400, 1600)
        assert table.c_list == (2, 3, 4)
        assert len(table.variants) == 4

    def test_overrides(self):
        plan = make_plan("fig1", n_list=(40,), m=10, threads=3,
                         out_dir="x")
        assert plan.n_list == (40,) and plan.m == 10
        assert plan.threads == 3

    def test_unknown_scenario(self):
        with pytest.raises(ValueError):
            make_plan("fig9")

    def test_ratio_figures_need_enough_categories(self):
        for scenario in ("fig2", "fig3"):
            with pytest.raises(ValueError, match="c >= 4"):
                make_plan(scenario, c_list=(3,))

    def test_config_drops_execution_details(self):
        plan = make_plan("fig1", threads=8, out_dir="/tmp/zzz")
        cfg = plan.config_dict()
        assert "threads" not in cfg and "out_dir" not in cfg
        assert cfg["scenario"] == "fig1"

    def test_plan_is_frozen(self):
        plan = make_plan("fig1")
        with pytest.raises(dataclasses.FrozenInstanceError):
            plan.m = 7

    def test_default_designs(self):
        assert default_theta0(2).beta[0] == 2.0
        t4 = default_theta0(4)
        assert list(t4.alpha) == [0.7, 1.4]
        t5 = default_theta0(5)
        assert len(t5.alpha) == 3 and all(t5.alpha[1:] > t5.alpha[:-1])
        t2p2 = default_theta0(2, p=2)
        assert len(t2p2.beta) == 2


def _files_bytes(out_dir, manifest):
    return {name: (out_dir / name).read_bytes() for name in manifest.files}


class TestDeterminism:
    def test_trace_outputs_ignore_thread_count(self, tmp_path):
        kw = dict(n_list=(40,), m=10)
        m1 = orchestrate(make_plan("fig1", out_dir=str(tmp_path / "a"),
                                   threads=1, **kw))
        m2 = orchestrate(make_plan("fig1", out_dir=str(tmp_path / "b"),
                                   threads=2, **kw))
        assert m1.files == m2.files
        assert _files_bytes(tmp_path / "a", m1) == _files_bytes(
            tmp_path / "b", m2)
        assert "fig1.svg" in m1.files

    def test_diagnose_outputs_ignore_thread_count(self, tmp_path):
        m1 = orchestrate(make_plan("diagnose", out_dir=str(tmp_path / "a"),
                                   threads=1, **_SMALL_DIAG))
        m2 = orchestrate(make_plan("diagnose", out_dir=str(tmp_path / "b"),
                                   threads=2, **_SMALL_DIAG))
        assert m1.files == m2.files
        assert _files_bytes(tmp_path / "a", m1) == _files_bytes(
            tmp_path / "b", m2)


class TestResume:
    def test_second_run_skips_and_keeps_bytes(self, tmp_path):
        plan = make_plan("fig1", out_dir=str(tmp_path), n_list=(40,), m=10)
        m1 = orchestrate(plan)
        stamp = {name: (tmp_path / name).stat().st_mtime_ns
                 for name in m1.files}
        m2 = orchestrate(plan)
        assert m2.files == m1.files
        for name in m1.files:
            assert (tmp_path / name).stat().st_mtime_ns == stamp[name]
        # per-cell timings recorded on the first pass survive the resume
        assert all("seconds" in c for k, c in m2.cells.items()
                   if not k.endswith("figure"))

    def test_missing_file_recomputed_identically(self, tmp_path):
        plan = make_plan("fig1", out_dir=str(tmp_path), n_list=(40,), m=10)
        m1 = orchestrate(plan)
        blobs = _files_bytes(tmp_path, m1)
        victim = next(n for n in m1.files if n.endswith(".csv"))
        (tmp_path / victim).unlink()
        m2 = orchestrate(plan)
        assert m2.files == m1.files
        assert _files_bytes(tmp_path, m2) == blobs

    def test_changed_config_recomputes(self, tmp_path):
        orchestrate(make_plan("fig1", out_dir=str(tmp_path), n_list=(40,),
                              m=10))
        m2 = orchestrate(make_plan("fig1", out_dir=str(tmp_path),
                                   n_list=(40,), m=12))
        trace = next(n for n in m2.files if n.endswith(".csv"))
        body = (tmp_path / trace).read_text().strip().splitlines()
        assert len(body) == 1 + 13  # header plus steps 0..12


class TestCustomScenario:
    def test_explicit_grid_runs_like_diagnose(self, tmp_path):
        plan = make_plan("custom", out_dir=str(tmp_path),
                         variants=("binary-null",), c_list=(2,),
                         **_SMALL_DIAG)
        manifest = orchestrate(plan)
        assert "custom/binary-null/c2/n60" in manifest.cells
        assert manifest.cells["custom/summary"]["files"] == [
            "diagnostics.csv"]
        assert (tmp_path / "custom_binary-null_c2_n60_one_step.json"
                ).exists()

    def test_grid_is_required(self):
        with pytest.raises(ValueError, match="no defaults"):
            make_plan("custom", n_list=(60,))


class TestFailureRecords:
    def test_failed_cell_recorded_then_retried(self, tmp_path, monkeypatch):
        import mcmcdegen.harness as harness_mod

        real = one_step_statistic

        def flaky(variant, cfg, n, R, transform, seed, **kw):
            if n == 80:
                raise ValueError("synthetic cell failure")
            return real(variant, cfg, n, R, transform, seed, **kw)

        monkeypatch.setattr(harness_mod, "one_step_statistic", flaky)
        opts = dict(_SMALL_DIAG, n_list=(60, 80))
        plan = make_plan("diagnose", out_dir=str(tmp_path), **opts)
        with pytest.raises(RuntimeError, match="1 of 2 cells failed"):
            orchestrate(plan)

        manifest = RunManifest.load(tmp_path / "manifest.json")
        bad = manifest.cells["diagnose/binary-null/c2/n80"]
        assert bad["error"] == "ValueError: synthetic cell failure"
        assert "files" not in bad
        good = manifest.cells["diagnose/binary-null/c2/n60"]
        assert good["files"] and all(
            (tmp_path / f).exists() for f in good["files"])
        assert not (tmp_path / "diagnostics.csv").exists()

        # same configuration, healthy estimator: only the failed cell
        # reruns, and the summary covers the reloaded cell too
        monkeypatch.setattr(harness_mod, "one_step_statistic", real)
        m2 = orchestrate(plan)
        assert "error" not in m2.cells["diagnose/binary-null/c2/n80"]
        rows = (tmp_path / "diagnostics.csv").read_text().splitlines()
        assert {row.split(",")[2] for row in rows[1:]} == {"60", "80"}


class TestDiagnoseCells:
    def test_report_matches_direct_estimate(self, tmp_path):
        plan = make_plan("diagnose", out_dir=str(tmp_path), **_SMALL_DIAG)
        orchestrate(plan)
        stored = DiagnosticsReport.load(
            tmp_path / "diagnose_binary-null_c2_n60_one_step.json")
        seed = RngStream(plan.master_seed, "diagnose", "binary-null", 2,
                         60).seed_int()
        direct = one_step_statistic(
            "binary-null", ModelConfig(c=2), 60, 2, "theta", seed,
            theta0=default_theta0(2), inner=4, starts=2, bank_size=128,
            pool=1024)
        assert stored.estimates == direct.estimates

    def test_summary_csv_lists_every_estimate(self, tmp_path):
        plan = make_plan("diagnose", out_dir=str(tmp_path), **_SMALL_DIAG)
        orchestrate(plan)
        lines = (tmp_path / "diagnostics.csv").read_text().splitlines()
        assert lines[0] == "variant,c,n,statistic,value,se"
        stats = {line.split(",")[3] for line in lines[1:]}
        assert stats == {"one_step:D", "risk_prime:Rprime",
                         "risk_prime:Rprime_localized"}


class TestTableOutputs:
    def test_csv_and_detail(self, tmp_path):
        plan = make_plan(
            "table1", out_dir=str(tmp_path), threads=2, R=4,
            variants=("beta",), c_list=(2,), n_list=(100, 400, 1600),
            options={"datasets": 2, "inner": 2, "starts": 2,
                     "bank_size": 128, "pool": 1024})
        manifest = orchestrate(plan)
        lines = (tmp_path / "table1.csv").read_text().splitlines()
        assert lines[0] == "variant,c,n,D,se,label"
        assert len(lines) == 4
        labels = {line.split(",")[-1] for line in lines[1:]}
        assert len(labels) == 1  # one verdict per cell
        assert labels <= {"X", "O", "inconclusive"}
        detail = json.loads((tmp_path / "table1.json").read_text())
        assert set(detail) == {"beta/c2"}
        assert set(detail["beta/c2"]) == {"label", "D", "se", "ratio"}
        for n in (100, 400, 1600):
            name = f"table1_beta_c2_n{n}.json"
            assert name in manifest.files
            assert DiagnosticsReport.load(tmp_path / name).n == n


class TestFigures:
    def test_fig2_panels_and_styles(self, tmp_path):
        plan = make_plan("fig2", out_dir=str(tmp_path), n_list=(60,), m=8)
        orchestrate(plan)
        body = (tmp_path / "fig2.svg").read_text()
        for title in ("second cut trajectory", "third cut trajectory",
                      "slope trajectory"):
            assert title in body
        assert "polyline" in body
        assert 'stroke-dasharray="6,4"' in body   # rescaled series
        assert 'stroke-dasharray="2,3"' in body   # truth reference line

    def test_fig3_single_ratio_panel(self, tmp_path):
        plan = make_plan("fig3", out_dir=str(tmp_path), n_list=(60,), m=8)
        orchestrate(plan)
        body = (tmp_path / "fig3.svg").read_text()
        assert "cut-ratio trajectory" in body
        assert body.count("<polyline") == 2

    def test_manifest_hashes_are_accurate(self, tmp_path):
        plan = make_plan("fig1", out_dir=str(tmp_path), n_list=(40,), m=10)
        manifest = orchestrate(plan)
        import hashlib
        for name, digest in manifest.files.items():
            actual = hashlib.sha256((tmp_path / name).read_bytes()).hexdigest()
            assert actual == digest

    def test_manifest_roundtrip(self, tmp_path):
        plan = make_plan("fig1", out_dir=str(tmp_path), n_list=(40,), m=10)
        m1 = orchestrate(plan)
        back = RunManifest.load(tmp_path / "manifest.json")
        assert back.scenario == "fig1"
        assert back.config == m1.config
        assert back.files == m1.files
