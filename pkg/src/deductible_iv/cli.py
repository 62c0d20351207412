"""Reproducible pipeline runs driven by a YAML configuration.

Stages: generate -> adjudicate -> cohort -> estimate -> report, each a
subcommand writing files under the run's output directory.  A run manifest
records the configuration hash and checksums of every written file, so two
runs with identical config and seeds are byte-comparable.

Exit code is nonzero iff any stage hard-fails; individual model failures
inside ``estimate`` are isolated to their (outcome, stratum) cell.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import pandas as pd
import yaml

from . import __version__, codes, cohort, estimation
from .generator import (
    GeneratorConfig,
    GeneratorConfigError,
    export_dataset,
    generate_with_truth,
    load_dataset,
)
from .plan import (
    BenefitPlan,
    CostSharingMode,
    Encounter,
    Setting,
    replay_family_period,
)

SCHEMA_VERSION = 1

DEFAULT_ESTIMATORS = ("2sri", "naive", "2sls")

NA = "NA"


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    generator: GeneratorConfig
    strata: tuple[str, ...] = cohort.STRATA
    outcomes: tuple[str, ...] = codes.OUTCOMES
    estimators: tuple[str, ...] = DEFAULT_ESTIMATORS
    bootstrap_reps: int = 1000
    bootstrap_seed: int = 0
    index_seed: int = 0
    out_dir: str = "run"

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if raw.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(
                f"config schema_version must be {SCHEMA_VERSION}, got {raw.get('schema_version')!r}"
            )
        known = {"schema_version", "generator", "cohort", "estimation", "report"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")

        gen_raw = raw.get("generator", {}) or {}
        gen_fields = {f.name for f in dataclasses.fields(GeneratorConfig)}
        bad = set(gen_raw) - gen_fields
        if bad:
            raise ConfigError(f"unknown generator keys: {sorted(bad)}")
        if "planted_effects" in gen_raw:
            gen_raw["planted_effects"] = dict(gen_raw["planted_effects"])
        if "deductible_band_weights" in gen_raw:
            gen_raw["deductible_band_weights"] = tuple(gen_raw["deductible_band_weights"])
        if "oop_max_multipliers" in gen_raw:
            gen_raw["oop_max_multipliers"] = tuple(gen_raw["oop_max_multipliers"])
        generator = GeneratorConfig(**gen_raw)
        generator.validate()

        coh = raw.get("cohort", {}) or {}
        bad = set(coh) - {"strata", "index_seed"}
        if bad:
            raise ConfigError(f"unknown cohort keys: {sorted(bad)}")
        strata = tuple(coh.get("strata", cohort.STRATA))
        for s in strata:
            if s not in cohort.STRATA:
                raise ConfigError(f"unknown stratum: {s}")

        est = raw.get("estimation", {}) or {}
        bad = set(est) - {"outcomes", "estimators", "bootstrap_reps", "bootstrap_seed"}
        if bad:
            raise ConfigError(f"unknown estimation keys: {sorted(bad)}")
        outcomes = tuple(est.get("outcomes", codes.OUTCOMES))
        for o in outcomes:
            if o not in codes.OUTCOMES:
                raise ConfigError(f"unknown outcome: {o}")
        estimators = tuple(est.get("estimators", DEFAULT_ESTIMATORS))
        for e in estimators:
            if e not in DEFAULT_ESTIMATORS:
                raise ConfigError(f"unknown estimator: {e}")

        rep = raw.get("report", {}) or {}
        bad = set(rep) - {"out_dir"}
        if bad:
            raise ConfigError(f"unknown report keys: {sorted(bad)}")

        return cls(
            generator=generator,
            strata=strata,
            outcomes=outcomes,
            estimators=estimators,
            bootstrap_reps=int(est.get("bootstrap_reps", 1000)),
            bootstrap_seed=int(est.get("bootstrap_seed", 0)),
            index_seed=int(coh.get("index_seed", 0)),
            out_dir=str(rep.get("out_dir", "run")),
        )

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Records config digest and output checksums for a run."""

    def __init__(self, out_dir: Path, config_digest: str):
        self.path = out_dir / "manifest.json"
        if self.path.exists():
            with open(self.path, "r", encoding="utf-8") as fh:
                self.data = json.load(fh)
        else:
            self.data = {
                "package_version": __version__,
                "config_sha256": config_digest,
                "files": {},
            }
        if self.data.get("config_sha256") != config_digest:
            raise ConfigError("output directory was produced with a different config")

    def record(self, *paths: Path) -> None:
        for p in paths:
            self.data["files"][p.name] = _sha256(p)
        with open(self.path, "w", encoding="utf-8") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# stages


def cmd_generate(config: RunConfig, out: Path) -> list[Path]:
    pop = generate_with_truth(config.generator)
    data_dir = out / "data"
    paths = export_dataset(pop, data_dir)
    return list(paths.values())


def _plan_from_row(row) -> BenefitPlan:
    from .generator import DEFAULT_COPAYS

    return BenefitPlan(
        individual_deductible=int(row["individual_deductible"]),
        family_deductible=int(row["family_deductible"]),
        coinsurance_rate=float(row["coinsurance_rate"]),
        copay_schedule=dict(DEFAULT_COPAYS),
        family_oop_max=int(row["family_oop_max"]),
        cost_sharing_mode=CostSharingMode(row["cost_sharing_mode"]),
    )


def cmd_adjudicate(config: RunConfig, out: Path) -> list[Path]:
    """Replay every family-period and write the accounting summary."""
    frames = load_dataset(out / "data")
    members, encounters = frames["members"], frames["encounters"]
    plans = members.drop_duplicates("family_id").set_index("family_id")

    rows = []
    for (fid, period), group in encounters.groupby(["family_id", "period"]):
        plan = _plan_from_row(plans.loc[fid])
        encs = [
            Encounter(
                encounter_id=r.encounter_id,
                member_id=r.member_id,
                family_id=r.family_id,
                service_date=int(r.service_date),
                setting=Setting(r.setting),
                allowed_amount=int(r.allowed_amount),
                diagnosis_codes=tuple(c for c in str(r.diagnosis_codes).split(";") if c),
                procedure_codes=tuple(c for c in str(r.procedure_codes).split(";") if c),
                cost_sharing_exempt=bool(r.cost_sharing_exempt),
            )
            for r in group.itertuples()
        ]
        state, _ = replay_family_period(plan, encs)
        rows.append(
            {
                "family_id": fid,
                "period": period,
                "deductible_met": int(state.family_deductible_met_date is not None),
                "met_day": state.family_deductible_met_date
                if state.family_deductible_met_date is not None
                else -1,
                "oop_max_met": int(state.family_oop_max_met_date is not None),
                "family_accumulated": state.family_accumulated,
                "family_oop_accumulated": state.family_oop_accumulated,
            }
        )
    path = out / "adjudication_summary.tsv"
    pd.DataFrame(rows).to_csv(path, sep="\t", index=False)
    return [path]


def cmd_cohort(config: RunConfig, out: Path) -> list[Path]:
    frames = load_dataset(out / "data")
    rows, report = cohort.build_cohort(
        frames["members"],
        frames["encounters"],
        frames["injuries"],
        index_seed=config.index_seed,
    )
    matrix_path = out / "analysis_matrix.tsv"
    cohort.write_analysis_matrix(rows, matrix_path)
    report_path = out / "filter_report.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "input_rows": report.input_rows,
                "removed": report.removed,
                "output_rows": report.output_rows,
            },
            fh,
            indent=2,
        )
        fh.write("\n")
    return [matrix_path, report_path]


RESULT_COLUMNS = (
    "outcome",
    "stratum",
    "estimator",
    "n_obs",
    "ME_pp",
    "ci_lo",
    "ci_hi",
    "first_stage_F",
    "reps_completed",
)


def _na_row(outcome, stratum, estimator, n_obs=0):
    return dict(
        outcome=outcome,
        stratum=stratum,
        estimator=estimator,
        n_obs=n_obs,
        ME_pp=NA,
        ci_lo=NA,
        ci_hi=NA,
        first_stage_F=NA,
        reps_completed=NA,
    )


def _estimate_cell(rows, outcome, estimator, reps, seed):
    if estimator in ("2sri", "naive"):
        res = estimation.cluster_bootstrap(
            rows, outcome, estimator=estimator, reps=reps, seed=seed
        )
        return dict(
            outcome=outcome,
            stratum="",
            estimator=estimator,
            n_obs=res.n_obs,
            ME_pp=f"{res.point_estimate_me:.4f}",
            ci_lo=f"{res.ci95[0]:.4f}",
            ci_hi=f"{res.ci95[1]:.4f}",
            first_stage_F=(
                f"{res.diagnostics['first_stage_f']:.2f}"
                if "first_stage_f" in res.diagnostics
                else NA
            ),
            reps_completed=int(res.diagnostics["reps_completed"]),
        )
    me, diag = estimation.two_stage_least_squares(rows, outcome)
    se = diag["se_pp"]
    return dict(
        outcome=outcome,
        stratum="",
        estimator=estimator,
        n_obs=len(rows),
        ME_pp=f"{me:.4f}",
        ci_lo=f"{me - 1.96 * se:.4f}",
        ci_hi=f"{me + 1.96 * se:.4f}",
        first_stage_F=NA,
        reps_completed=0,
    )


def cmd_estimate(config: RunConfig, out: Path) -> list[Path]:
    """Fit every (outcome, stratum, estimator) cell with crash isolation."""
    matrix = cohort.read_analysis_matrix(out / "analysis_matrix.tsv")
    results = []
    errors = []
    for stratum in config.strata:
        stratum_rows = cohort.derive_strata(matrix, stratum)
        for outcome in config.outcomes:
            fit_rows = cohort.outcome_rows(stratum_rows, outcome)
            for estimator in config.estimators:
                if (
                    not cohort.stratum_defines_outcome(stratum, outcome)
                    or fit_rows.empty
                    or fit_rows[f"y_{outcome}"].nunique() < 2
                ):
                    results.append(_na_row(outcome, stratum, estimator, len(fit_rows)))
                    continue
                try:
                    cell = _estimate_cell(
                        fit_rows,
                        outcome,
                        estimator,
                        config.bootstrap_reps,
                        config.bootstrap_seed,
                    )
                    cell["stratum"] = stratum
                    results.append(cell)
                except (
                    estimation.SeparationError,
                    estimation.CollinearityError,
                    estimation.UnstableBootstrapError,
                ) as exc:
                    results.append(_na_row(outcome, stratum, estimator, len(fit_rows)))
                    errors.append(
                        {"outcome": outcome, "stratum": stratum, "estimator": estimator, "error": str(exc)}
                    )
    frame = pd.DataFrame(results, columns=RESULT_COLUMNS)
    results_path = out / "results.tsv"
    frame.to_csv(results_path, sep="\t", index=False)
    written = [results_path]
    if errors:
        err_path = out / "estimation_errors.tsv"
        pd.DataFrame(errors).to_csv(err_path, sep="\t", index=False)
        written.append(err_path)
    return written


def cmd_report(config: RunConfig, out: Path) -> list[Path]:
    """Render one human-readable table per estimator from results.tsv."""
    results = pd.read_csv(out / "results.tsv", sep="\t", keep_default_na=False)
    written = []
    for estimator in config.estimators:
        sub = results[results["estimator"] == estimator]
        lines = [f"Marginal effect of meeting the family deductible ({estimator})", ""]
        for stratum in config.strata:
            block = sub[sub["stratum"] == stratum]
            if block.empty:
                continue
            lines.append(f"[{stratum}]")
            lines.append(f"{'outcome':<24}{'ME (pp)':>10}{'95% CI':>22}{'Obs':>10}")
            for r in block.itertuples():
                if r.ME_pp == NA:
                    lines.append(f"{r.outcome:<24}{'N/A':>10}{'':>22}{r.n_obs:>10}")
                else:
                    ci = f"[{float(r.ci_lo):.1f}, {float(r.ci_hi):.1f}]"
                    lines.append(
                        f"{r.outcome:<24}{float(r.ME_pp):>10.1f}{ci:>22}{r.n_obs:>10}"
                    )
            lines.append("")
        path = out / f"table_{estimator}.txt"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(path)
    return written


STAGES = {
    "generate": cmd_generate,
    "adjudicate": cmd_adjudicate,
    "cohort": cmd_cohort,
    "estimate": cmd_estimate,
    "report": cmd_report,
}
STAGE_ORDER = ("generate", "adjudicate", "cohort", "estimate", "report")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="deductible-iv",
        description="Simulate family cost-sharing and estimate deductible effects.",
    )
    parser.add_argument("command", choices=list(STAGE_ORDER) + ["run-all"])
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument("--out", default=None, help="output directory (overrides config)")
    parser.add_argument("--seed-override", type=int, default=None)
    parser.add_argument("--stratum", default=None, help="restrict estimation to one stratum")
    parser.add_argument("--jobs", type=int, default=1, help="reserved; runs are single-process")
    args = parser.parse_args(argv)

    try:
        config = RunConfig.from_yaml(args.config)
    except (ConfigError, GeneratorConfigError, OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    # the manifest identifies a run by its file configuration; explicit
    # command-line overrides are the operator's responsibility
    base_digest = config.digest()
    if args.seed_override is not None:
        config.generator.seed = args.seed_override
    if args.stratum is not None:
        if args.stratum not in cohort.STRATA:
            print(f"error: unknown stratum {args.stratum}", file=sys.stderr)
            return 2
        config.strata = (args.stratum,)
    out = Path(args.out if args.out is not None else config.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    stages = STAGE_ORDER if args.command == "run-all" else (args.command,)
    try:
        manifest = RunManifest(out, base_digest)
        for stage in stages:
            written = STAGES[stage](config, out)
            manifest.record(*written)
            print(f"{stage}: wrote {', '.join(p.name for p in written)}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (cohort.DataIntegrityError, cohort.DegenerateCohortError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
