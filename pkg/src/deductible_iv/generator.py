"""Seeded synthetic population generator.

Produces families on deductible plans, baseline spending claims, accidental
injury shocks, and utilization outcomes driven by a structural model with a
known planted effect of meeting the family deductible.  A family-level
latent health preference confounds plan choice, spending, and utilization;
injury shocks are independent of it (unless the endogenous switch is on),
giving a valid instrument with known ground truth.

Generation order per family is fixed and every draw comes from a substream
keyed by (seed, family index), so output is deterministic regardless of
how families are batched.
"""

from __future__ import annotations

import math
import random
from pathlib import Path
from dataclasses import dataclass, field, fields
from typing import Iterable

import numpy as np
import pandas as pd

from . import codes
from .plan import (
    BenefitPlan,
    CostSharingMode,
    CostSharingState,
    Encounter,
    Setting,
    replay_family_period,
)

DAYS_PER_PERIOD = 365
MONTH_DAYS = 30  # benefit-period months are 12 equal 30-day bins, days 0-359

RACE_LEVELS = ("white", "black", "asian", "hispanic", "other", "unknown")
RACE_WEIGHTS = (0.598, 0.031, 0.042, 0.054, 0.049, 0.226)
ADULT_AGE_BANDS = ((18, 26), (27, 40), (41, 50), (51, 64))
ADULT_AGE_WEIGHTS = (0.307, 0.261, 0.263, 0.169)
YOST_WEIGHTS = (0.072, 0.109, 0.169, 0.257, 0.392)
ELIX_WEIGHTS = (0.734, 0.168, 0.059, 0.039)
FAMILY_SIZE3_SHARE = 0.377
# relative injury propensity of 3-member vs 4+-member families, from the
# observed 25.3% / 74.7% split of injury families against the 37.7% / 62.3%
# population split
INJURY_SIZE3_FACTOR = 0.253 / 0.377
INJURY_SIZE4_FACTOR = 0.747 / 0.623

_REFERENCE_DEDUCTIBLE = 330_000  # cents; population-median family deductible

DEDUCTIBLE_BANDS_CENTS = (
    (50_000, 99_900),
    (100_100, 250_000),
    (250_100, 500_000),
    (500_100, 800_000),
)

DEFAULT_PLANTED_EFFECTS = {
    "emergency_department": 10.0,
    "inpatient": 0.3,
    "urgent_care": 1.7,
    "outpatient_clinic": 2.8,
    "ambulatory_surgery": 0.4,
    "office_visit": 3.0,
    "venipuncture": -2.7,
    "physical_therapy": -0.6,
    "mammography": -9.4,
    "wellness": -5.7,
}

DEFAULT_BASE_RATES = {
    "emergency_department": 0.10,
    "inpatient": 0.03,
    "urgent_care": 0.14,
    "outpatient_clinic": 0.50,
    "ambulatory_surgery": 0.05,
    "office_visit": 0.45,
    "venipuncture": 0.25,
    "physical_therapy": 0.08,
    "mammography": 0.30,
    "wellness": 0.30,
}

# structural covariate coefficients (applied to centered covariates)
AGE_COEF = {o: -0.08 if o in ("emergency_department", "urgent_care") else 0.05 for o in codes.OUTCOMES}
ELIX_COEF = {o: 0.15 for o in codes.OUTCOMES}
MEAN_AGE = 22.0 * 0.307 + 33.5 * 0.261 + 45.5 * 0.263 + 57.5 * 0.169
MEAN_ELIX = 0.168 + 2 * 0.059 + 3 * 0.039

DEFAULT_COPAYS = {
    Setting.OUTPATIENT_CLINIC: 2_200,
    Setting.URGENT_CARE: 7_600,
    Setting.AMBULATORY_SURGERY: 7_600,
    Setting.EMERGENCY_DEPARTMENT: 19_900,
    Setting.INPATIENT: 40_500,
}


class GeneratorConfigError(ValueError):
    """Invalid generator configuration; message lists offending fields."""


class DegenerateCohortError(RuntimeError):
    """No family met its deductible, so index dates cannot be assigned."""


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


@dataclass
class GeneratorConfig:
    n_families: int = 2_000
    seed: int = 20_230_901
    n_periods: int = 1
    deductible_band_weights: tuple[float, float, float, float] = (0.210, 0.256, 0.287, 0.248)
    family_injury_rate: float = 0.061
    second_injury_rate: float = 0.08
    confounding_strength: float = 0.5
    exogenous_instrument: bool = True
    endogeneity_strength: float = 1.0
    planted_effects: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_PLANTED_EFFECTS))
    outcome_base_rates: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_BASE_RATES))
    injury_cost_median_cents: int = 230_000
    injury_cost_sigma: float = 0.6
    injury_severity_cost_factor: float = 1.4
    baseline_claim_rate: float = 1.2
    baseline_cost_median_cents: int = 20_000
    baseline_cost_sigma: float = 1.0
    spending_confounder_weight: float = 0.8
    deductible_spending_elasticity: float = 1.0
    plan_selection_tilt: float = 0.25
    coinsurance_rate: float = 0.21
    copay_mode_share: float = 0.40
    oop_max_multipliers: tuple[float, float] = (1.8, 3.0)
    pre_index_wellness_rate: float = 0.15
    prior_mammogram_rate: float = 0.45
    index_dates_post_injury: bool = False
    individual_deductible_ratio: float = 0.44

    def validate(self) -> None:
        bad = []
        if self.n_families < 0:
            bad.append("n_families")
        if self.n_periods < 1:
            bad.append("n_periods")
        if not (0.0 <= self.family_injury_rate <= 1.0):
            bad.append("family_injury_rate")
        if not (0.0 <= self.second_injury_rate <= 1.0):
            bad.append("second_injury_rate")
        # published shares are rounded, so allow slack; draws renormalize
        if abs(sum(self.deductible_band_weights) - 1.0) > 5e-3 or any(
            w < 0 for w in self.deductible_band_weights
        ):
            bad.append("deductible_band_weights")
        if not (0.0 <= self.coinsurance_rate <= 1.0):
            bad.append("coinsurance_rate")
        if not (0.0 <= self.copay_mode_share <= 1.0):
            bad.append("copay_mode_share")
        for name, rates in (("outcome_base_rates", self.outcome_base_rates),):
            if set(rates) != set(codes.OUTCOMES) or any(not 0.0 < r < 1.0 for r in rates.values()):
                bad.append(name)
        if any(o not in codes.OUTCOMES for o in self.planted_effects):
            bad.append("planted_effects")
        if any(not math.isfinite(v) for v in self.planted_effects.values()):
            bad.append("planted_effects")
        if self.injury_cost_median_cents <= 0 or self.baseline_cost_median_cents <= 0:
            bad.append("cost medians")
        if self.baseline_claim_rate < 0:
            bad.append("baseline_claim_rate")
        if not (0.0 <= self.pre_index_wellness_rate <= 1.0):
            bad.append("pre_index_wellness_rate")
        if not (0.0 <= self.prior_mammogram_rate <= 1.0):
            bad.append("prior_mammogram_rate")
        if not (0.0 < self.individual_deductible_ratio <= 1.0):
            bad.append("individual_deductible_ratio")
        if not (0.0 <= self.deductible_spending_elasticity <= 2.0):
            bad.append("deductible_spending_elasticity")
        if bad:
            raise GeneratorConfigError(f"invalid generator config fields: {', '.join(bad)}")

    def planted_index_shift(self, outcome: str) -> float:
        """Logit-scale shift reproducing the target pp change at covariate means."""
        base = self.outcome_base_rates[outcome]
        target = base + self.planted_effects.get(outcome, 0.0) / 100.0
        target = min(max(target, 1e-6), 1 - 1e-6)
        return logit(target) - logit(base)


@dataclass
class Member:
    member_id: str
    family_id: str
    age: int
    sex: str  # "female" | "male"
    race_ethnicity: str
    elixhauser_count: int
    yost_quintile: int
    is_adult: bool
    prior_mammogram: bool = False
    enrolled_full_period: bool = True


@dataclass
class Family:
    family_id: str
    members: list[Member]
    plan: BenefitPlan
    benefit_period: int = 0
    latent_health_preference: float = 0.0  # generator-internal; never exported


@dataclass
class InjuryEvent:
    member_id: str
    family_id: str
    period: int
    event_date: int
    icd10_code: str  # specific 3-char code; group derivable via codes.classify_injury
    ais_score: int
    treatment_setting: Setting
    injury_cost: int


@dataclass
class PeriodTruth:
    """Ground truth for one family-period; never exported to analysis files."""

    family_id: str
    period: int
    latent: float
    injured: bool
    n_injuries: int
    injured_member: str | None
    d_observed: bool
    d_no_injury: bool  # deductible met if the family had no injury
    d_with_injury: bool  # deductible met if the shock template is applied
    index_day: int
    met_day: int | None
    oop_max_met: bool

    @property
    def complier(self) -> bool:
        return self.d_with_injury and not self.d_no_injury


@dataclass
class GeneratedPopulation:
    config: GeneratorConfig
    families: list[Family]
    members: list[Member]
    encounters: dict[int, list[Encounter]]  # period -> claims
    injuries: list[InjuryEvent]
    truth: dict[tuple[str, int], PeriodTruth]
    final_states: dict[tuple[str, int], CostSharingState]


def _sample_weighted(rng: random.Random, levels, weights) -> int:
    u = rng.random()
    acc = 0.0
    for i, w in enumerate(weights):
        acc += w
        if u < acc:
            return i
    return len(weights) - 1


def _lognormal_cents(rng: random.Random, median_cents: int, sigma: float) -> int:
    return max(1, int(round(median_cents * math.exp(sigma * rng.gauss(0.0, 1.0)))))


def _draw_members(rng: random.Random, fid: str, cfg: GeneratorConfig) -> list[Member]:
    size = 3 if rng.random() < FAMILY_SIZE3_SHARE else rng.randint(4, 6)
    members = []
    for j in range(size):
        adult = j < 2 or rng.random() < 0.25
        if adult:
            lo, hi = ADULT_AGE_BANDS[_sample_weighted(rng, ADULT_AGE_BANDS, ADULT_AGE_WEIGHTS)]
            age = rng.randint(lo, hi)
        else:
            age = rng.randint(2, 17)
        sex = "female" if rng.random() < 0.5 else "male"
        race = RACE_LEVELS[_sample_weighted(rng, RACE_LEVELS, RACE_WEIGHTS)]
        elix = _sample_weighted(rng, range(4), ELIX_WEIGHTS) if adult else 0
        members.append(
            Member(
                member_id=f"{fid}m{j}",
                family_id=fid,
                age=age,
                sex=sex,
                race_ethnicity=race,
                elixhauser_count=elix,
                yost_quintile=0,  # family-level, filled by caller
                is_adult=adult,
                prior_mammogram=(
                    sex == "female" and 50 <= age <= 64 and rng.random() < cfg.prior_mammogram_rate
                ),
            )
        )
    return members


def _draw_plan(rng: random.Random, cfg: GeneratorConfig, latent: float) -> BenefitPlan:
    tilt = cfg.plan_selection_tilt * cfg.confounding_strength * latent
    weights = [
        w * math.exp(-tilt * (b - 1.5)) for b, w in enumerate(cfg.deductible_band_weights)
    ]
    total = sum(weights)
    band = _sample_weighted(rng, range(4), [w / total for w in weights])
    lo, hi = DEDUCTIBLE_BANDS_CENTS[band]
    family_ded = rng.randrange(lo, hi + 1, 100)
    oop_lo, oop_hi = cfg.oop_max_multipliers
    oop_max = int(family_ded * (oop_lo + (oop_hi - oop_lo) * rng.random()))
    return BenefitPlan(
        individual_deductible=min(
            family_ded, int(family_ded * cfg.individual_deductible_ratio) // 5_000 * 5_000
        ),
        family_deductible=family_ded,
        coinsurance_rate=cfg.coinsurance_rate,
        copay_schedule=dict(DEFAULT_COPAYS),
        family_oop_max=oop_max,
        cost_sharing_mode=(
            CostSharingMode.COPAY
            if rng.random() < cfg.copay_mode_share
            else CostSharingMode.COINSURANCE
        ),
    )


def _claim_rate(cfg: GeneratorConfig, member: Member, latent: float) -> float:
    log_rate = (
        math.log(cfg.baseline_claim_rate)
        + 0.22 * member.elixhauser_count
        + 0.05 * (member.age - 40) / 20.0
        + cfg.spending_confounder_weight * cfg.confounding_strength * latent
    )
    return math.exp(log_rate)


def _poisson(rng: random.Random, lam: float) -> int:
    # Knuth; lambda stays small (< ~15) in this generator
    limit = math.exp(-lam)
    k, p = 0, 1.0
    while True:
        p *= rng.random()
        if p <= limit:
            return k
        k += 1


def _draw_injury_template(
    rng: random.Random, fam: Family, period: int, cfg: GeneratorConfig
) -> InjuryEvent:
    table = codes.injury_group_table()
    groups = list(table.group_counts)
    counts = np.array([table.group_counts[g] for g in groups], dtype=float)
    weights = counts / counts.sum()
    group = groups[_sample_weighted(rng, groups, weights)]
    code = rng.choice(table.group_codes[group])
    ais = codes.ais_severity_table().sample(group, rng)
    setting = (
        Setting.INPATIENT
        if (ais >= 3 and rng.random() < 0.8) or rng.random() < 0.05
        else Setting.EMERGENCY_DEPARTMENT
    )
    month = rng.randint(1, 12)
    day = (month - 1) * MONTH_DAYS + rng.randint(0, MONTH_DAYS - 1)
    cost = _lognormal_cents(
        rng,
        int(cfg.injury_cost_median_cents * cfg.injury_severity_cost_factor ** (ais - 1)),
        cfg.injury_cost_sigma,
    )
    member = rng.choice(fam.members)
    return InjuryEvent(
        member_id=member.member_id,
        family_id=fam.family_id,
        period=period,
        event_date=day,
        icd10_code=code,
        ais_score=ais,
        treatment_setting=setting,
        injury_cost=cost,
    )


def _injury_encounter(ev: InjuryEvent, seq: int) -> Encounter:
    return Encounter(
        encounter_id=f"{ev.family_id}p{ev.period}inj{seq}",
        member_id=ev.member_id,
        family_id=ev.family_id,
        service_date=ev.event_date,
        setting=ev.treatment_setting,
        allowed_amount=ev.injury_cost,
        diagnosis_codes=(ev.icd10_code,),
    )


def _met_day(state: CostSharingState) -> int | None:
    return state.family_deductible_met_date


_CONDITION_STEMS: list[str] | None = None


def _condition_stems() -> list[str]:
    global _CONDITION_STEMS
    if _CONDITION_STEMS is None:
        _CONDITION_STEMS = sorted(codes.comorbidity_map())
    return _CONDITION_STEMS


class _FamilyDraw:
    """All per-family-period randomness not dependent on index dates."""

    __slots__ = (
        "family",
        "period",
        "baseline",
        "injuries",
        "template",
        "n_injuries",
        "state_no_injury",
        "state_with_injury",
        "state_observed",
    )

    def __init__(self, family: Family, period: int):
        self.family = family
        self.period = period
        self.baseline: list[Encounter] = []
        self.injuries: list[InjuryEvent] = []
        self.template: InjuryEvent | None = None
        self.n_injuries = 0
        self.state_no_injury: CostSharingState | None = None
        self.state_with_injury: CostSharingState | None = None
        self.state_observed: CostSharingState | None = None


def _simulate_family_period(
    fam: Family, period: int, cfg: GeneratorConfig, master_seed: int
) -> _FamilyDraw:
    rng = random.Random(f"{master_seed}:{fam.family_id}:{period}:claims")
    draw = _FamilyDraw(fam, period)

    # baseline spending claims (drive deductible attainment; truncated to
    # the pre-index window before export).  Costs scale with the family's
    # deductible choice: higher-deductible plans attract higher spenders,
    # keeping attainment rates comparable across plan bands.
    cost_median = int(
        cfg.baseline_cost_median_cents
        * (fam.plan.family_deductible / _REFERENCE_DEDUCTIBLE) ** cfg.deductible_spending_elasticity
    )
    seq = 0
    for member in fam.members:
        n_claims = _poisson(rng, _claim_rate(cfg, member, fam.latent_health_preference))
        # pre-index encounters also carry the member's planted comorbidity
        # codes so the distinct-condition counter can reproduce the count
        stems = rng.sample(_condition_stems(), member.elixhauser_count) if member.is_adult else []
        if member.is_adult and n_claims < max(1, len(stems)):
            n_claims = max(1, len(stems))  # ensure a carrier claim for codes
        for c in range(n_claims):
            cost = _lognormal_cents(rng, cost_median, cfg.baseline_cost_sigma)
            day = rng.randint(0, DAYS_PER_PERIOD - 1)
            diagnosis = (stems[c],) if c < len(stems) else ()
            if c == 0 and diagnosis == () and stems:
                diagnosis = tuple(stems)
            draw.baseline.append(
                Encounter(
                    encounter_id=f"{fam.family_id}p{period}b{seq:03d}",
                    member_id=member.member_id,
                    family_id=fam.family_id,
                    service_date=day,
                    setting=Setting.OUTPATIENT_CLINIC,
                    allowed_amount=cost if c < n_claims else 0,
                    diagnosis_codes=diagnosis,
                )
            )
            seq += 1
        # history claims are free carriers when the member had no spending
        if member.is_adult and n_claims == 0 and stems:
            draw.baseline.append(
                Encounter(
                    encounter_id=f"{fam.family_id}p{period}b{seq:03d}",
                    member_id=member.member_id,
                    family_id=fam.family_id,
                    service_date=0,
                    setting=Setting.OUTPATIENT_CLINIC,
                    allowed_amount=0,
                    diagnosis_codes=tuple(stems),
                )
            )
            seq += 1

    # injury shock: a template is always drawn (for the counterfactual),
    # occurrence is a separate family-level Bernoulli whose rate depends only
    # on the 3 vs 4+ size band (and, in endogenous mode, the latent)
    draw.template = _draw_injury_template(rng, fam, period, cfg)
    size_factor = INJURY_SIZE3_FACTOR if len(fam.members) == 3 else INJURY_SIZE4_FACTOR
    rate = min(cfg.family_injury_rate * size_factor, 0.999)
    if not cfg.exogenous_instrument:
        rate = sigmoid(logit(max(rate, 1e-9)) + cfg.endogeneity_strength * fam.latent_health_preference)
    occurred = rng.random() < rate
    if occurred:
        draw.injuries.append(draw.template)
        if rng.random() < cfg.second_injury_rate:
            second = _draw_injury_template(rng, fam, period, cfg)
            while second.member_id == draw.template.member_id:
                second = _draw_injury_template(rng, fam, period, cfg)
            draw.injuries.append(second)
    draw.n_injuries = len(draw.injuries)

    injury_encounters = [_injury_encounter(ev, i) for i, ev in enumerate(draw.injuries)]
    template_encounter = _injury_encounter(draw.template, 0)

    state0, _ = replay_family_period(fam.plan, draw.baseline)
    draw.state_no_injury = state0
    state1, _ = replay_family_period(fam.plan, draw.baseline + [template_encounter])
    draw.state_with_injury = state1
    if draw.n_injuries == 0:
        draw.state_observed = state0
    elif draw.n_injuries == 1:
        draw.state_observed = state1
    else:
        observed, _ = replay_family_period(fam.plan, draw.baseline + injury_encounters)
        draw.state_observed = observed
    return draw


def _outcome_index(
    cfg: GeneratorConfig, outcome: str, member: Member, latent: float
) -> float:
    return (
        logit(cfg.outcome_base_rates[outcome])
        + AGE_COEF[outcome] * ((member.age - 40) / 10.0 - (MEAN_AGE - 40) / 10.0)
        + ELIX_COEF[outcome] * (member.elixhauser_count - MEAN_ELIX)
        + cfg.confounding_strength * latent
    )


def structural_probability(
    cfg: GeneratorConfig, outcome: str, member: Member, latent: float, treated: bool
) -> float:
    """P(outcome fires in the post-index window) under the structural model."""
    idx = _outcome_index(cfg, outcome, member, latent)
    if treated:
        idx += cfg.planted_index_shift(outcome)
    return sigmoid(idx)


def mammography_eligible(member: Member) -> bool:
    return member.sex == "female" and 50 <= member.age <= 64 and not member.prior_mammogram


_PROCEDURE_CARRIERS = {
    "office_visit": ("99213",),
    "venipuncture": ("36415",),
    "physical_therapy": ("97110",),
    "mammography": ("77067",),
    "wellness": ("99395",),
}

_SETTING_OUTCOME = {
    "emergency_department": Setting.EMERGENCY_DEPARTMENT,
    "inpatient": Setting.INPATIENT,
    "urgent_care": Setting.URGENT_CARE,
    "outpatient_clinic": Setting.OUTPATIENT_CLINIC,
    "ambulatory_surgery": Setting.AMBULATORY_SURGERY,
}

_ED_COST_MEDIAN = 150_000
_ED_COST_SIGMA = 0.5
_INPATIENT_COST_MEDIAN = 900_000
_OTHER_COST_MEDIAN = 25_000


def _outcome_cost(rng: random.Random, outcome: str) -> int:
    if outcome == "emergency_department":
        return _lognormal_cents(rng, _ED_COST_MEDIAN, _ED_COST_SIGMA)
    if outcome == "inpatient":
        return _lognormal_cents(rng, _INPATIENT_COST_MEDIAN, _ED_COST_SIGMA)
    return _lognormal_cents(rng, _OTHER_COST_MEDIAN, 0.8)


def _draw_ed_diagnosis(rng: random.Random) -> str:
    weights = codes.avoidable_ed_weights()
    groups = list(weights.draw_weights)
    return groups[_sample_weighted(rng, groups, [weights.draw_weights[g] for g in groups])]


def generate_with_truth(cfg: GeneratorConfig) -> GeneratedPopulation:
    """Full generation pass returning ground truth alongside the data."""
    cfg.validate()

    families: list[Family] = []
    for i in range(cfg.n_families):
        rng = random.Random(f"{cfg.seed}:{i}:family")
        fid = f"f{i:06d}"
        latent = rng.gauss(0.0, 1.0)
        members = _draw_members(rng, fid, cfg)
        yost = _sample_weighted(rng, range(5), YOST_WEIGHTS) + 1
        for m in members:
            m.yost_quintile = yost
        plan = _draw_plan(rng, cfg, latent)
        families.append(Family(fid, members, plan, 0, latent))

    encounters: dict[int, list[Encounter]] = {p: [] for p in range(cfg.n_periods)}
    injuries: list[InjuryEvent] = []
    truth: dict[tuple[str, int], PeriodTruth] = {}
    final_states: dict[tuple[str, int], CostSharingState] = {}

    for period in range(cfg.n_periods):
        draws = [_simulate_family_period(fam, period, cfg, cfg.seed) for fam in families]

        met_days = sorted(
            d for d in (_met_day(dr.state_observed) for dr in draws) if d is not None
        )
        if not met_days and cfg.n_families > 0:
            raise DegenerateCohortError(
                f"no family met its deductible in period {period}; cannot assign index dates"
            )
        index_rng = random.Random(f"{cfg.seed}:{period}:index")

        for dr in draws:
            fam = dr.family
            met = _met_day(dr.state_observed)
            if met is not None:
                index_day = met
            else:
                index_day = met_days[index_rng.randrange(len(met_days))]
                if cfg.index_dates_post_injury and dr.n_injuries:
                    eligible = [d for d in met_days if d >= dr.injuries[0].event_date]
                    if eligible:
                        index_day = eligible[index_rng.randrange(len(eligible))]
            d_obs = met is not None

            truth[(fam.family_id, period)] = PeriodTruth(
                family_id=fam.family_id,
                period=period,
                latent=fam.latent_health_preference,
                injured=dr.n_injuries > 0,
                n_injuries=dr.n_injuries,
                injured_member=dr.injuries[0].member_id if dr.injuries else None,
                d_observed=d_obs,
                d_no_injury=_met_day(dr.state_no_injury) is not None,
                d_with_injury=_met_day(dr.state_with_injury) is not None,
                index_day=index_day,
                met_day=met,
                oop_max_met=dr.state_observed.family_oop_max_met_date is not None,
            )
            injuries.extend(dr.injuries)

            # exported claims: pre-index baseline, injuries, preventive use
            # before the index, and structural outcome encounters after it
            kept = [e for e in dr.baseline if e.service_date <= index_day]
            kept.extend(_injury_encounter(ev, i) for i, ev in enumerate(dr.injuries))

            orng = random.Random(f"{cfg.seed}:{fam.family_id}:{period}:outcomes")
            seq = 0
            for member in fam.members:
                if not member.is_adult:
                    continue
                if orng.random() < cfg.pre_index_wellness_rate and index_day > 0:
                    kept.append(
                        Encounter(
                            encounter_id=f"{fam.family_id}p{period}w{seq:03d}",
                            member_id=member.member_id,
                            family_id=fam.family_id,
                            service_date=orng.randint(0, index_day - 1),
                            setting=Setting.OUTPATIENT_CLINIC,
                            allowed_amount=15_000,
                            procedure_codes=("99395",),
                            cost_sharing_exempt=True,
                        )
                    )
                    seq += 1
                for outcome in codes.OUTCOMES:
                    if outcome == "mammography" and not mammography_eligible(member):
                        continue
                    p = structural_probability(
                        cfg, outcome, member, fam.latent_health_preference, d_obs
                    )
                    if orng.random() >= p:
                        continue
                    day = orng.randint(min(index_day + 1, DAYS_PER_PERIOD - 1), DAYS_PER_PERIOD - 1)
                    setting = _SETTING_OUTCOME.get(outcome, Setting.OUTPATIENT_CLINIC)
                    procs = _PROCEDURE_CARRIERS.get(outcome, ())
                    diagnosis = ()
                    if outcome == "emergency_department":
                        diagnosis = (_draw_ed_diagnosis(orng),)
                    # outcome utilization carries real costs only for treated
                    # families (these claims fund post-deductible OOP
                    # accumulation; untreated families must not be pushed
                    # over their deductible by outcome draws)
                    cost = _outcome_cost(orng, outcome) if d_obs else 0
                    exempt = outcome in ("wellness", "mammography")
                    kept.append(
                        Encounter(
                            encounter_id=f"{fam.family_id}p{period}o{seq:03d}",
                            member_id=member.member_id,
                            family_id=fam.family_id,
                            service_date=day,
                            setting=setting,
                            allowed_amount=0 if exempt else cost,
                            procedure_codes=procs,
                            diagnosis_codes=diagnosis,
                            cost_sharing_exempt=exempt,
                        )
                    )
                    seq += 1

            final_state, _ = replay_family_period(fam.plan, kept)
            final_states[(fam.family_id, period)] = final_state
            encounters[period].extend(kept)

    members = [m for fam in families for m in fam.members]
    return GeneratedPopulation(
        config=cfg,
        families=families,
        members=members,
        encounters=encounters,
        injuries=injuries,
        truth=truth,
        final_states=final_states,
    )


def generate_population(
    cfg: GeneratorConfig,
) -> tuple[list[Family], dict[int, list[Encounter]], list[InjuryEvent]]:
    pop = generate_with_truth(cfg)
    return pop.families, pop.encounters, pop.injuries


def potential_outcome_oracle(
    cfg: GeneratorConfig, seed_set: Iterable[int]
) -> dict[str, float]:
    """Ground-truth complier LATE per outcome, in percentage points.

    Re-generates the population for each seed, restricts to analysis-eligible
    complier rows (adult, non-injured member, single-injury family), and
    averages the structural difference in measured-flag probability under
    treatment on and off.  The outpatient-clinic flag accounts for procedure
    encounters being materialized in the outpatient setting.
    """
    sums = {o: 0.0 for o in codes.OUTCOMES}
    counts = {o: 0 for o in codes.OUTCOMES}
    procedure_outcomes = [o for o in codes.OUTCOMES if o in _PROCEDURE_CARRIERS]
    n_compliers = 0
    for seed in seed_set:
        run_cfg = GeneratorConfig(**{**_cfg_dict(cfg), "seed": seed})
        pop = generate_with_truth(run_cfg)
        fam_by_id = {f.family_id: f for f in pop.families}
        for (fid, _period), t in pop.truth.items():
            if not t.complier or t.n_injuries > 1:
                continue
            fam = fam_by_id[fid]
            for member in fam.members:
                if not member.is_adult or not (18 <= member.age <= 64):
                    continue
                if member.member_id == t.injured_member:
                    continue
                n_compliers += 1
                p1 = {}
                p0 = {}
                for o in codes.OUTCOMES:
                    if o == "mammography" and not mammography_eligible(member):
                        continue
                    p1[o] = structural_probability(run_cfg, o, member, t.latent, True)
                    p0[o] = structural_probability(run_cfg, o, member, t.latent, False)
                for o in codes.OUTCOMES:
                    if o not in p1:
                        continue
                    if o == "outpatient_clinic":
                        # measured flag is an OR with procedure carriers
                        m1 = 1.0 - (1.0 - p1[o]) * math.prod(
                            1.0 - p1.get(po, 0.0) for po in procedure_outcomes
                        )
                        m0 = 1.0 - (1.0 - p0[o]) * math.prod(
                            1.0 - p0.get(po, 0.0) for po in procedure_outcomes
                        )
                        sums[o] += m1 - m0
                    else:
                        sums[o] += p1[o] - p0[o]
                    counts[o] += 1
    if n_compliers == 0:
        raise DegenerateCohortError("no compliers in oracle sample; LATE undefined")
    return {o: 100.0 * sums[o] / counts[o] for o in codes.OUTCOMES if counts[o]}


def _cfg_dict(cfg: GeneratorConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


# ---------------------------------------------------------------------------
# dataset export / import


def export_dataset(pop: GeneratedPopulation, out_dir) -> dict[str, "Path"]:
    """Write members/encounters/injuries TSVs plus per-period index dates.

    The latent health preference and counterfactual truth never leave the
    process; exported files contain only what a downstream analyst could see.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth = pop.truth

    member_rows = []
    for fam in pop.families:
        for period in range(pop.config.n_periods):
            t = truth[(fam.family_id, period)]
            for m in fam.members:
                member_rows.append(
                    {
                        "member_id": m.member_id,
                        "family_id": m.family_id,
                        "period": period,
                        "age": m.age,
                        "sex": m.sex,
                        "race_ethnicity": m.race_ethnicity,
                        "elixhauser_count": m.elixhauser_count,
                        "yost_quintile": m.yost_quintile,
                        "family_size": len(fam.members),
                        "family_deductible": fam.plan.family_deductible,
                        "individual_deductible": fam.plan.individual_deductible,
                        "family_oop_max": fam.plan.family_oop_max,
                        "coinsurance_rate": fam.plan.coinsurance_rate,
                        "cost_sharing_mode": fam.plan.cost_sharing_mode.value,
                        "index_day": t.index_day,
                        "deductible_met": int(t.d_observed),
                        "oop_max_met": int(t.oop_max_met),
                        "prior_mammogram": int(m.prior_mammogram),
                        "enrolled_full_period": int(m.enrolled_full_period),
                    }
                )
    members = pd.DataFrame(member_rows)

    enc_rows = []
    for period, encs in pop.encounters.items():
        for e in encs:
            enc_rows.append(
                {
                    "encounter_id": e.encounter_id,
                    "member_id": e.member_id,
                    "family_id": e.family_id,
                    "period": period,
                    "service_date": e.service_date,
                    "setting": e.setting.value,
                    "allowed_amount": e.allowed_amount,
                    "diagnosis_codes": ";".join(e.diagnosis_codes),
                    "procedure_codes": ";".join(e.procedure_codes),
                    "cost_sharing_exempt": int(e.cost_sharing_exempt),
                }
            )
    encounters = pd.DataFrame(enc_rows)

    injuries = pd.DataFrame(
        [
            {
                "member_id": ev.member_id,
                "family_id": ev.family_id,
                "period": ev.period,
                "event_date": ev.event_date,
                "icd10_code": ev.icd10_code,
                "ais_score": ev.ais_score,
                "treatment_setting": ev.treatment_setting.value,
                "injury_cost": ev.injury_cost,
            }
            for ev in pop.injuries
        ],
        columns=[
            "member_id",
            "family_id",
            "period",
            "event_date",
            "icd10_code",
            "ais_score",
            "treatment_setting",
            "injury_cost",
        ],
    )

    paths = {}
    for name, frame in (
        ("members", members),
        ("encounters", encounters),
        ("injuries", injuries),
    ):
        path = out / f"{name}.tsv"
        frame.to_csv(path, sep="\t", index=False)
        paths[name] = path
    return paths


def load_dataset(data_dir) -> dict[str, "pd.DataFrame"]:
    """Read back a dataset written by :func:`export_dataset`."""
    data = Path(data_dir)
    frames = {}
    for name in ("members", "encounters", "injuries"):
        path = data / f"{name}.tsv"
        if not path.exists():
            raise FileNotFoundError(f"missing dataset file {path}")
        frames[name] = pd.read_csv(path, sep="\t", keep_default_na=False)
    return frames
