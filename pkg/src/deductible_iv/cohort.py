"""Cohort construction: eligibility rules, index dates, analysis rows.

Turns the raw member/encounter/injury files into one analysis row per
eligible adult per benefit period, carrying the treatment (family deductible
met), the instrument (another family member's accidental injury), the index
date that opens the outcome window, covariates, and outcome flags.

Rules apply in a fixed, documented order so per-rule removal counts are
reproducible:

    age -> full-enrollment -> family-size -> multi-injury -> injured-member
    -> (per-outcome) preventive pre-index exclusion

The injured member's own rows are always removed; their follow-up care must
not contaminate the outcome measurement.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from . import codes

RULE_ORDER = (
    "age_18_64",
    "full_enrollment",
    "family_size_3plus",
    "multi_injury_family",
    "injured_member",
)

#: Canonical sensitivity strata, reporting order.
STRATA = (
    "all",
    "hdhp",
    "low_deductible",
    "exclude_oop_max_met",
    "first_family_injury",
    "exclude_severe",
    "exclude_december",
    "age_le_30",
    "age_31_50",
    "age_gt_50",
    "female",
    "male",
    "next_period_preventive",
)

HDHP_THRESHOLD_CENTS = 300_000  # family deductible >= $3,000
SEVERE_AIS = 3
PREVENTIVE_OUTCOMES = ("mammography", "wellness")


class DataIntegrityError(ValueError):
    """Family linkage between input files is inconsistent."""


class DegenerateCohortError(RuntimeError):
    """No met dates exist to define the index-date distribution."""


class UnknownStratumError(KeyError):
    pass


@dataclass(frozen=True)
class PersonPeriod:
    """One individual x benefit-period analysis row."""

    member_id: str
    family_id: str
    benefit_period: int
    treatment_d: bool
    instrument_z: bool
    index_date: int
    age: int
    sex: str
    race_ethnicity: str
    elixhauser_count: int
    yost_quintile: int
    family_size: int
    family_deductible: int
    oop_max_met: bool
    outcome_flags: Mapping[str, bool]
    outcome_eligible: Mapping[str, bool]
    injury_month: int | None = None
    injured_member_ais: int | None = None


@dataclass
class CohortFilterReport:
    """Rows removed per rule, in application order."""

    input_rows: int = 0
    removed: dict[str, int] = field(default_factory=dict)
    output_rows: int = 0

    def check(self) -> None:
        if self.input_rows - sum(self.removed.values()) != self.output_rows:
            raise DataIntegrityError("filter report counts do not reconcile")


def month_of(day: int | np.ndarray):
    """Benefit-period month 1-12 for a day offset (days 360+ fold into 12)."""
    return np.minimum(np.asarray(day) // 30, 11) + 1


def assign_random_index_dates(
    n: int, met_date_distribution: Sequence[int], seed: int
) -> list[int]:
    """Draw n index dates i.i.d. from the empirical met-date distribution."""
    if len(met_date_distribution) == 0:
        raise DegenerateCohortError("no met dates available to sample index dates from")
    rng = random.Random(f"{seed}:index-dates")
    pool = sorted(met_date_distribution)
    return [pool[rng.randrange(len(pool))] for _ in range(n)]


def _outcome_flags(
    encounters: pd.DataFrame, index_by_row: pd.Series
) -> tuple[pd.DataFrame, pd.DataFrame, pd.Series]:
    """Per (member, period): post-index outcome flags, pre-index preventive
    flags, and the avoidable-ED flag.

    ``index_by_row`` maps (member_id, period) -> index day.
    """
    catalog = codes.outcome_catalog()
    enc = encounters.copy()
    key = pd.MultiIndex.from_frame(enc[["member_id", "period"]])
    enc["index_day"] = index_by_row.reindex(key).to_numpy()
    enc = enc[enc["index_day"].notna()]
    # the outcome window opens the day after the index date, so the
    # deductible-crossing claim itself never counts as utilization
    post = enc["service_date"] > enc["index_day"]

    flag_frames: dict[str, pd.Series] = {}
    pre_frames: dict[str, pd.Series] = {}

    for outcome, setting in catalog.setting_outcomes.items():
        hit = enc["setting"] == setting.value
        flag_frames[outcome] = hit & post
    proc_lists = enc["procedure_codes"].fillna("").astype(str).str.split(";")
    for outcome, codeset in catalog.code_outcomes.items():
        hit = proc_lists.map(lambda procs, cs=codeset: any(p in cs for p in procs))
        flag_frames[outcome] = hit & post
        if outcome in PREVENTIVE_OUTCOMES:
            pre_frames[outcome] = hit & ~post

    # avoidable-ED: post-index ED visits whose diagnosis group carries
    # positive non-emergent-avoidable weight
    weights = codes.avoidable_ed_weights()
    avoidable_groups = {g for g, s in weights.weights.items() if s.avoidable_flag}
    diag_lists = enc["diagnosis_codes"].fillna("").astype(str).str.split(";")
    avoid = (
        (enc["setting"] == "emergency_department")
        & post
        & diag_lists.map(lambda ds: any(d[:3] in avoidable_groups for d in ds if d))
    )

    grouping = [enc["member_id"], enc["period"]]
    flags = pd.DataFrame(flag_frames).groupby(grouping).any()
    pre = pd.DataFrame(pre_frames).groupby(grouping).any()
    avoidable = avoid.groupby(grouping).any()
    return flags, pre, avoidable


def build_cohort(
    members: pd.DataFrame,
    encounters: pd.DataFrame,
    injuries: pd.DataFrame,
    index_seed: int | None = None,
) -> tuple[pd.DataFrame, CohortFilterReport]:
    """Apply eligibility rules and assemble the analysis matrix.

    ``members`` must carry one row per member x period with plan fields,
    ``deductible_met``, and (optionally) ``index_day``.  When ``index_day``
    is absent, met rows index at their met date and non-met rows draw from
    the empirical met-date distribution using ``index_seed``.

    Returns the matrix (one row per eligible person-period) and a filter
    report with removals per rule in application order.
    """
    required = {"member_id", "family_id", "period", "age", "deductible_met"}
    missing = required - set(members.columns)
    if missing:
        raise DataIntegrityError(f"members file missing columns: {sorted(missing)}")
    bad_links = set(encounters["family_id"]) - set(members["family_id"])
    if bad_links:
        raise DataIntegrityError(f"encounters reference unknown families: {sorted(bad_links)[:5]}")

    report = CohortFilterReport(input_rows=len(members))
    rows = members.copy()

    keep = rows["age"].between(18, 64)
    report.removed["age_18_64"] = int((~keep).sum())
    rows = rows[keep]

    keep = rows["enrolled_full_period"].astype(bool)
    report.removed["full_enrollment"] = int((~keep).sum())
    rows = rows[keep]

    keep = rows["family_size"] >= 3
    report.removed["family_size_3plus"] = int((~keep).sum())
    rows = rows[keep]

    inj_counts = injuries.groupby(["family_id", "period"]).size()
    multi = set(inj_counts[inj_counts >= 2].index)
    fam_key = list(zip(rows["family_id"], rows["period"]))
    keep = ~pd.Series([k in multi for k in fam_key], index=rows.index)
    report.removed["multi_injury_family"] = int((~keep).sum())
    rows = rows[keep]

    injured = set(zip(injuries["member_id"], injuries["period"]))
    keep = ~pd.Series(
        [k in injured for k in zip(rows["member_id"], rows["period"])], index=rows.index
    )
    report.removed["injured_member"] = int((~keep).sum())
    rows = rows[keep].copy()

    # instrument and injury attributes from the (single) family injury
    single_inj = injuries[
        ~injuries.set_index(["family_id", "period"]).index.isin(multi)
    ]
    inj_by_fam = single_inj.set_index(["family_id", "period"])
    fam_idx = pd.MultiIndex.from_frame(rows[["family_id", "period"]])
    rows["instrument_z"] = fam_idx.isin(inj_by_fam.index).astype(int)
    rows["injury_month"] = (
        pd.Series(month_of(inj_by_fam["event_date"]), index=inj_by_fam.index)
        .reindex(fam_idx, fill_value=0)
        .to_numpy(dtype=int)
    )
    rows["injured_member_ais"] = (
        inj_by_fam["ais_score"].reindex(fam_idx, fill_value=0).to_numpy(dtype=int)
    )

    # index dates: met rows use the met date; non-met rows draw from the
    # empirical met-date distribution unless the generator already assigned
    if "index_day" not in rows.columns:
        if index_seed is None:
            raise DegenerateCohortError("index_day column absent and no index_seed given")
        met_days = rows.loc[rows["deductible_met"] == 1, "met_day"]
        rows["index_day"] = rows.get("met_day", pd.Series(dtype=float))
        unmet = rows["deductible_met"] == 0
        rows.loc[unmet, "index_day"] = assign_random_index_dates(
            int(unmet.sum()), met_days.tolist(), index_seed
        )
    rows["index_day"] = rows["index_day"].astype(int)

    index_by_row = pd.Series(
        rows["index_day"].to_numpy(),
        index=pd.MultiIndex.from_frame(rows[["member_id", "period"]]),
    )
    flags, pre, avoidable = _outcome_flags(encounters, index_by_row)
    row_key = pd.MultiIndex.from_frame(rows[["member_id", "period"]])
    for outcome in codes.OUTCOMES:
        col = flags[outcome] if outcome in flags else pd.Series(dtype=bool)
        rows[f"y_{outcome}"] = col.reindex(row_key, fill_value=False).to_numpy(dtype=int)
    rows["y_avoidable_ed"] = avoidable.reindex(row_key, fill_value=False).to_numpy(dtype=int)

    # outcome-specific eligibility
    pre_wellness = (
        pre["wellness"].reindex(row_key, fill_value=False).to_numpy()
        if "wellness" in pre
        else np.zeros(len(rows), bool)
    )
    pre_mammo = (
        pre["mammography"].reindex(row_key, fill_value=False).to_numpy()
        if "mammography" in pre
        else np.zeros(len(rows), bool)
    )
    rows["elig_wellness"] = (~pre_wellness).astype(int)
    rows["elig_mammography"] = (
        (rows["sex"] == "female").to_numpy()
        & rows["age"].between(50, 64).to_numpy()
        & (rows["prior_mammogram"].to_numpy() == 0)
        & ~pre_mammo
    ).astype(int)

    # next-period preventive follow-up (defined when a later period exists)
    max_period = int(members["period"].max())
    rows["has_next_period"] = (rows["period"] < max_period).astype(int)
    for outcome in PREVENTIVE_OUTCOMES:
        nxt = flags[outcome] if outcome in flags else pd.Series(dtype=bool)
        nxt_key = pd.MultiIndex.from_arrays([rows["member_id"], rows["period"] + 1])
        rows[f"y_next_{outcome}"] = nxt.reindex(nxt_key, fill_value=False).to_numpy(dtype=int)

    # prior-period treatment for the placebo regression
    d_prev = rows.set_index(["member_id", "period"])["deductible_met"]
    prev_key = pd.MultiIndex.from_arrays([rows["member_id"], rows["period"] - 1])
    rows["d_prev"] = d_prev.reindex(prev_key).fillna(-1).to_numpy(dtype=int)

    rows = rows.sort_values(["family_id", "member_id", "period"]).reset_index(drop=True)
    report.output_rows = len(rows)
    report.check()
    return rows, report


def derive_strata(rows: pd.DataFrame, stratum: str) -> pd.DataFrame:
    """Filter the analysis matrix down to one sensitivity stratum.

    ``next_period_preventive`` keeps rows with a following benefit period
    and swaps the preventive outcome flags for their next-period versions;
    non-preventive outcomes are not defined in that stratum.
    """
    if stratum == "all":
        return rows
    if stratum == "hdhp":
        return rows[rows["family_deductible"] >= HDHP_THRESHOLD_CENTS]
    if stratum == "low_deductible":
        return rows[rows["family_deductible"] < HDHP_THRESHOLD_CENTS]
    if stratum == "exclude_oop_max_met":
        return rows[rows["oop_max_met"] == 0]
    if stratum == "first_family_injury":
        # drop family-periods preceded by an injury in an earlier period
        injured = rows.loc[rows["instrument_z"] == 1, ["family_id", "period"]]
        first_injury = injured.groupby("family_id")["period"].min()
        first_for_row = first_injury.reindex(rows["family_id"]).to_numpy()
        keep = np.isnan(first_for_row) | (rows["period"].to_numpy() <= first_for_row)
        return rows[keep]
    if stratum == "exclude_severe":
        return rows[rows["injured_member_ais"] < SEVERE_AIS]
    if stratum == "exclude_december":
        return rows[month_of(rows["index_day"].to_numpy()) != 12]
    if stratum == "age_le_30":
        return rows[rows["age"] <= 30]
    if stratum == "age_31_50":
        return rows[rows["age"].between(31, 50)]
    if stratum == "age_gt_50":
        return rows[rows["age"] > 50]
    if stratum == "female":
        return rows[rows["sex"] == "female"]
    if stratum == "male":
        return rows[rows["sex"] == "male"]
    if stratum == "next_period_preventive":
        out = rows[rows["has_next_period"] == 1].copy()
        for outcome in PREVENTIVE_OUTCOMES:
            out[f"y_{outcome}"] = out[f"y_next_{outcome}"]
        return out
    raise UnknownStratumError(stratum)


def stratum_defines_outcome(stratum: str, outcome: str) -> bool:
    """Whether (outcome, stratum) is an estimable cell of the results table.

    Mammography is restricted to women 50-64, so sex- and age-stratified
    mammography models are undefined; the next-period stratum re-indexes
    preventive outcomes only.
    """
    if stratum == "next_period_preventive":
        return outcome in PREVENTIVE_OUTCOMES
    if outcome == "mammography" and stratum in (
        "age_le_30",
        "age_31_50",
        "age_gt_50",
        "female",
        "male",
    ):
        return False
    return True


def outcome_rows(rows: pd.DataFrame, outcome: str) -> pd.DataFrame:
    """Rows eligible for one outcome's model (preventive exclusions applied)."""
    col = f"elig_{outcome}"
    if col in rows.columns:
        return rows[rows[col] == 1]
    return rows


def write_analysis_matrix(rows: pd.DataFrame, path) -> None:
    rows.to_csv(path, sep="\t", index=False)


def read_analysis_matrix(path) -> pd.DataFrame:
    return pd.read_csv(path, sep="\t", keep_default_na=False)
