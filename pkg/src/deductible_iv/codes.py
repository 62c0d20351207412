"""Clinical-coding utilities.

Injury classification against the accidental-injury ICD-10 group table,
severity sampling on the 6-point abbreviated injury scale, comorbidity
counting, outcome-flag derivation, and the synthetic avoidable-ED scorer.

Code tables ship as versioned tab-separated files under ``data/`` with a
checksum line; see :func:`load_table`.
"""

from __future__ import annotations

import hashlib
import re
import warnings
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Mapping, Sequence

import numpy as np

from .plan import Encounter, Setting

AIS_SCORES = (1, 2, 3, 4, 5, 6)

_CODE3_RE = re.compile(r"^[A-Z][0-9]{2}")


class TableChecksumError(ValueError):
    """A data table's checksum line does not match its contents."""


class UnknownInjuryGroupError(KeyError):
    pass


class MalformedCodeError(ValueError):
    pass


def load_table(name: str) -> list[dict[str, str]]:
    """Load a packaged TSV table, verifying its checksum line."""
    text = resources.files("deductible_iv.data").joinpath(name).read_text("utf-8")
    first, _, body = text.partition("\n")
    m = re.search(r"sha256=([0-9a-f]{64})", first)
    if not m:
        raise TableChecksumError(f"{name}: missing checksum line")
    if hashlib.sha256(body.encode("utf-8")).hexdigest() != m.group(1):
        raise TableChecksumError(f"{name}: checksum mismatch")
    lines = body.rstrip("\n").split("\n")
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:]]


def normalize_code(code: str) -> str:
    """First three characters of an ICD-10 code, upper-cased.

    Raises MalformedCodeError for strings that cannot be an ICD-10 stem.
    """
    stem = code.strip().upper().replace(".", "")[:3]
    if not _CODE3_RE.match(stem):
        raise MalformedCodeError(f"not an ICD-10 code: {code!r}")
    return stem


@dataclass(frozen=True)
class InjuryGroupTable:
    """Accidental-injury groups: 3-char code -> (group, category)."""

    code_to_group: Mapping[str, str]
    group_category: Mapping[str, str]
    group_codes: Mapping[str, tuple[str, ...]]
    group_counts: Mapping[str, int]  # sampled population counts per group

    @classmethod
    def load(cls) -> "InjuryGroupTable":
        rows = load_table("injury_groups.tsv")
        code_to_group: dict[str, str] = {}
        category: dict[str, str] = {}
        codes: dict[str, list[str]] = {}
        counts: dict[str, int] = {}
        for row in rows:
            code, group = row["icd10_3char"], row["group"]
            if code in code_to_group:
                raise ValueError(f"overlapping injury code {code}")
            code_to_group[code] = group
            category[group] = row["category"]
            codes.setdefault(group, []).append(code)
            counts[group] = int(row["group_count"])
        return cls(
            code_to_group=code_to_group,
            group_category=category,
            group_codes={g: tuple(c) for g, c in codes.items()},
            group_counts=counts,
        )

    @property
    def groups(self) -> tuple[str, ...]:
        return tuple(self.group_category)

    def group_weights(self) -> dict[str, float]:
        total = sum(self.group_counts.values())
        return {g: n / total for g, n in self.group_counts.items()}


_GROUP_TABLE: InjuryGroupTable | None = None


def injury_group_table() -> InjuryGroupTable:
    global _GROUP_TABLE
    if _GROUP_TABLE is None:
        _GROUP_TABLE = InjuryGroupTable.load()
    return _GROUP_TABLE


def classify_injury(diagnosis_codes: Sequence[str]) -> tuple[str, str] | None:
    """First accidental-injury (group, category) among the codes, or None."""
    table = injury_group_table()
    for code in diagnosis_codes:
        stem = normalize_code(code)
        group = table.code_to_group.get(stem)
        if group is not None:
            return group, table.group_category[group]
    return None


class AisSeverityTable:
    """Group-conditional severity distributions on the 1-6 scale.

    The group-weighted mixture of the conditional tables reproduces the
    population severity marginal.
    """

    def __init__(self, probs: Mapping[str, Sequence[float]]):
        self._probs = {}
        for group, p in probs.items():
            arr = np.asarray(p, dtype=float)
            if arr.shape != (6,) or (arr < 0).any():
                raise ValueError(f"bad severity row for {group}")
            if abs(arr.sum() - 1.0) > 1e-8:
                raise ValueError(f"severity probabilities for {group} do not sum to 1")
            self._probs[group] = arr / arr.sum()

    @classmethod
    def load(cls) -> "AisSeverityTable":
        rows = load_table("ais_severity.tsv")
        return cls(
            {row["group"]: [float(row[f"p{k}"]) for k in AIS_SCORES] for row in rows}
        )

    def probabilities(self, group: str) -> np.ndarray:
        try:
            return self._probs[group]
        except KeyError:
            raise UnknownInjuryGroupError(group) from None

    def sample(self, group: str, rng) -> int:
        """Draw a score 1-6; rng needs only a ``random()`` method."""
        u = rng.random()
        cumulative = np.cumsum(self.probabilities(group))
        return int(np.searchsorted(cumulative, u, side="right")) + 1


_AIS_TABLE: AisSeverityTable | None = None


def ais_severity_table() -> AisSeverityTable:
    global _AIS_TABLE
    if _AIS_TABLE is None:
        _AIS_TABLE = AisSeverityTable.load()
    return _AIS_TABLE


def ais_severity(icd10_group: str, rng) -> int:
    """Sample an AIS score 1-6 for an injury group."""
    return ais_severity_table().sample(icd10_group, rng)


_COMORBIDITY_MAP: dict[str, str] | None = None


def comorbidity_map() -> dict[str, str]:
    """ICD-10 3-char stem -> comorbidity condition name."""
    global _COMORBIDITY_MAP
    if _COMORBIDITY_MAP is None:
        _COMORBIDITY_MAP = {
            row["icd10_3char"]: row["condition"] for row in load_table("comorbidity_map.tsv")
        }
    return _COMORBIDITY_MAP


def elixhauser_count(member_history: Iterable[str]) -> int:
    """Distinct-comorbidity count from pre-index diagnoses, capped at 3."""
    mapping = comorbidity_map()
    conditions = set()
    for code in member_history:
        try:
            stem = normalize_code(code)
        except MalformedCodeError:
            continue
        condition = mapping.get(stem)
        if condition is not None:
            conditions.add(condition)
    return min(len(conditions), 3)


@dataclass(frozen=True)
class AvoidableEdScore:
    p_nonemergent_avoidable: float
    p_pc_treatable: float
    p_preventable: float
    p_unavoidable: float

    @property
    def avoidable_flag(self) -> bool:
        return self.p_nonemergent_avoidable > 0.0


_ZERO_SCORE = AvoidableEdScore(0.0, 0.0, 0.0, 0.0)


class AvoidableEdWeights:
    """Synthetic stand-in for the licensed ED urgency classifier."""

    def __init__(self, weights: Mapping[str, AvoidableEdScore], draw_weights: Mapping[str, float]):
        self.weights = dict(weights)
        self.draw_weights = dict(draw_weights)

    @classmethod
    def load(cls) -> "AvoidableEdWeights":
        rows = load_table("avoidable_ed_weights.tsv")
        weights = {}
        draws = {}
        for row in rows:
            score = AvoidableEdScore(
                float(row["p_nonemergent_avoidable"]),
                float(row["p_pc_treatable"]),
                float(row["p_preventable"]),
                float(row["p_unavoidable"]),
            )
            total = (
                score.p_nonemergent_avoidable
                + score.p_pc_treatable
                + score.p_preventable
                + score.p_unavoidable
            )
            if score.p_nonemergent_avoidable < 0 or total > 1.0 + 1e-9:
                raise ValueError(f"bad ED weight row for {row['group']}")
            weights[row["group"]] = score
            draws[row["group"]] = float(row["draw_weight"])
        return cls(weights, draws)


_ED_WEIGHTS: AvoidableEdWeights | None = None


def avoidable_ed_weights() -> AvoidableEdWeights:
    global _ED_WEIGHTS
    if _ED_WEIGHTS is None:
        _ED_WEIGHTS = AvoidableEdWeights.load()
    return _ED_WEIGHTS


def avoidable_ed(enc: Encounter, weights: AvoidableEdWeights | None = None) -> AvoidableEdScore:
    """Score an ED visit; unknown diagnosis groups fall back to all-zero."""
    if enc.setting is not Setting.EMERGENCY_DEPARTMENT:
        raise ValueError("avoidable-ED scoring applies to emergency department visits only")
    weights = weights or avoidable_ed_weights()
    for code in enc.diagnosis_codes:
        try:
            stem = normalize_code(code)
        except MalformedCodeError:
            continue
        score = weights.weights.get(stem)
        if score is not None:
            return score
    warnings.warn(
        f"no ED weights for diagnosis codes {enc.diagnosis_codes}; defaulting to all-zero",
        stacklevel=2,
    )
    return _ZERO_SCORE


class OutcomeCatalog:
    """Utilization outcomes and the encounter fields that define them.

    Setting outcomes flag on the encounter's care setting; procedure
    outcomes flag on procedure codes.
    """

    def __init__(self, setting_outcomes: Mapping[str, Setting], code_outcomes: Mapping[str, frozenset[str]]):
        self.setting_outcomes = dict(setting_outcomes)
        self.code_outcomes = {k: frozenset(v) for k, v in code_outcomes.items()}

    @classmethod
    def load(cls) -> "OutcomeCatalog":
        rows = load_table("outcome_codes.tsv")
        settings: dict[str, Setting] = {}
        codes: dict[str, set[str]] = {}
        for row in rows:
            if row["kind"] == "setting":
                settings[row["outcome"]] = Setting(row["value"])
            else:
                codes.setdefault(row["outcome"], set()).add(row["value"])
        return cls(settings, {k: frozenset(v) for k, v in codes.items()})

    @property
    def outcomes(self) -> tuple[str, ...]:
        return tuple(self.setting_outcomes) + tuple(self.code_outcomes)

    def flags_for(self, enc: Encounter) -> set[str]:
        """Outcome names the encounter triggers."""
        hit = set()
        for name, setting in self.setting_outcomes.items():
            if enc.setting is setting:
                hit.add(name)
        if enc.procedure_codes:
            procs = set(enc.procedure_codes)
            for name, codeset in self.code_outcomes.items():
                if procs & codeset:
                    hit.add(name)
        return hit


_CATALOG: OutcomeCatalog | None = None


def outcome_catalog() -> OutcomeCatalog:
    global _CATALOG
    if _CATALOG is None:
        _CATALOG = OutcomeCatalog.load()
    return _CATALOG


#: All ten analysis outcomes in reporting order.
OUTCOMES = (
    "emergency_department",
    "inpatient",
    "urgent_care",
    "outpatient_clinic",
    "ambulatory_surgery",
    "office_visit",
    "venipuncture",
    "physical_therapy",
    "mammography",
    "wellness",
)
