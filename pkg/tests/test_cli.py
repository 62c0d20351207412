"""End-to-end pipeline tests for the command-line interface."""

import json

import pandas as pd
import pytest
import yaml

from deductible_iv import cli, codes, cohort


def write_config(path, **overrides):
    raw = {
        "schema_version": 1,
        "generator": {
            "n_families": 400,
            "seed": 12,
            "family_injury_rate": 0.15,
        },
        "estimation": {
            "outcomes": ["emergency_department", "wellness"],
            "estimators": ["2sri", "naive", "2sls"],
            "bootstrap_reps": 25,
        },
        "cohort": {"strata": ["all", "female", "male"]},
    }
    for key, val in overrides.items():
        if isinstance(val, dict) and key in raw:
            raw[key].update(val)
        else:
            raw[key] = val
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(raw, fh)
    return path


class TestConfigValidation:
    def test_missing_schema_version(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("generator: {n_families: 10}\n")
        assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_unknown_generator_key(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", generator={"n_familes": 10})
        assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_unknown_stratum(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", cohort={"strata": ["all", "bogus"]})
        assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_unknown_outcome(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", estimation={"outcomes": ["no_such"]})
        assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_invalid_generator_values(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", generator={"family_injury_rate": 2.0})
        assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["generate", "--config", str(tmp_path / "none.yaml")]) == 2

    def test_cli_unknown_stratum_flag(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml")
        rc = cli.main(
            ["estimate", "--config", str(cfg), "--out", str(tmp_path / "o"), "--stratum", "zzz"]
        )
        assert rc == 2


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "c.yaml")
    rc = cli.main(["run-all", "--config", str(cfg), "--out", str(root / "out")])
    assert rc == 0
    return root / "out"


class TestPipeline:
    def test_all_artifacts_written(self, run_dir):
        for name in (
            "data/members.tsv",
            "data/encounters.tsv",
            "data/injuries.tsv",
            "adjudication_summary.tsv",
            "analysis_matrix.tsv",
            "filter_report.json",
            "results.tsv",
            "manifest.json",
            "table_2sri.txt",
            "table_naive.txt",
            "table_2sls.txt",
        ):
            assert (run_dir / name).exists(), name

    def test_adjudication_agrees_with_generator(self, run_dir):
        """The independent replay stage reproduces the exported treatment
        flags and met days exactly."""
        summary = pd.read_csv(run_dir / "adjudication_summary.tsv", sep="\t")
        members = pd.read_csv(run_dir / "data" / "members.tsv", sep="\t")
        fam = members.drop_duplicates(["family_id", "period"])
        merged = summary.merge(fam, on=["family_id", "period"], suffixes=("_adj", "_gen"))
        assert (merged["deductible_met_adj"] == merged["deductible_met_gen"]).all()
        met = merged[merged["deductible_met_adj"] == 1]
        assert (met["met_day"] == met["index_day"]).all()

    def test_results_grid_complete(self, run_dir):
        results = pd.read_csv(run_dir / "results.tsv", sep="\t", keep_default_na=False)
        assert list(results.columns) == list(cli.RESULT_COLUMNS)
        # 2 outcomes x 3 strata x 3 estimators, one row per cell
        assert len(results) == 18
        key = results[["outcome", "stratum", "estimator"]].apply(tuple, axis=1)
        assert key.is_unique

    def test_filter_report_reconciles(self, run_dir):
        with open(run_dir / "filter_report.json") as fh:
            report = json.load(fh)
        assert report["input_rows"] - sum(report["removed"].values()) == report["output_rows"]
        assert list(report["removed"]) == list(cohort.RULE_ORDER)

    def test_manifest_hashes_outputs(self, run_dir):
        with open(run_dir / "manifest.json") as fh:
            manifest = json.load(fh)
        assert "results.tsv" in manifest["files"]
        assert len(manifest["files"]["results.tsv"]) == 64

    def test_report_tables_render(self, run_dir):
        text = (run_dir / "table_2sri.txt").read_text()
        assert "[all]" in text and "[female]" in text
        assert "emergency_department" in text

    def test_conflicting_config_rejected(self, run_dir, tmp_path):
        other = write_config(tmp_path / "other.yaml", generator={"seed": 999})
        rc = cli.main(["report", "--config", str(other), "--out", str(run_dir)])
        assert rc == 2


class TestDeterminism:
    def test_estimate_stage_reproducible(self, tmp_path):
        cfg = write_config(
            tmp_path / "c.yaml",
            estimation={"outcomes": ["wellness"], "estimators": ["2sri"], "bootstrap_reps": 20},
            cohort={"strata": ["all"]},
        )
        out = tmp_path / "out"
        assert cli.main(["run-all", "--config", str(cfg), "--out", str(out)]) == 0
        first = (out / "results.tsv").read_bytes()
        assert cli.main(["estimate", "--config", str(cfg), "--out", str(out)]) == 0
        assert (out / "results.tsv").read_bytes() == first

    def test_seed_override_changes_data(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml")
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["generate", "--config", str(cfg), "--out", str(a)]) == 0
        assert (
            cli.main(
                ["generate", "--config", str(cfg), "--out", str(b), "--seed-override", "777"]
            )
            == 0
        )
        assert (a / "data" / "members.tsv").read_bytes() != (b / "data" / "members.tsv").read_bytes()


class TestCrashIsolation:
    def test_degenerate_cells_become_na(self, tmp_path):
        """A stratum too small to fit gets NA cells, not a crashed run."""
        cfg = write_config(
            tmp_path / "c.yaml",
            generator={"n_families": 60, "seed": 4, "family_injury_rate": 0.15},
            estimation={
                "outcomes": ["mammography", "inpatient"],
                "estimators": ["2sri"],
                "bootstrap_reps": 10,
            },
            cohort={"strata": ["all", "age_le_30"]},
        )
        out = tmp_path / "out"
        assert cli.main(["run-all", "--config", str(cfg), "--out", str(out)]) == 0
        results = pd.read_csv(out / "results.tsv", sep="\t", keep_default_na=False)
        assert len(results) == 4
        # mammography in an age stratum is undefined by design
        cell = results[(results["outcome"] == "mammography") & (results["stratum"] == "age_le_30")]
        assert (cell["ME_pp"] == "NA").all()

    def test_stratum_restriction_flag(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml")
        out = tmp_path / "out"
        for stage in ("generate", "adjudicate", "cohort"):
            assert cli.main([stage, "--config", str(cfg), "--out", str(out)]) == 0
        assert (
            cli.main(
                ["estimate", "--config", str(cfg), "--out", str(out), "--stratum", "female"]
            )
            == 0
        )
        results = pd.read_csv(out / "results.tsv", sep="\t", keep_default_na=False)
        assert set(results["stratum"]) == {"female"}
