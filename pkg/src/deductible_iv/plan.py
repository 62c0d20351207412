"""Deterministic cost-sharing state machine for deductible plans.

Allocates each claim's allowed amount between patient and plan while
accumulating toward individual deductibles, the family deductible, and the
family out-of-pocket (OOP) maximum.  All money is integer cents so a replay
is bit-exact and order-stable.

Phases are family-level and monotone:

    pre_deductible -> post_deductible -> post_oop_max

A single claim may straddle phases: the part that fills remaining deductible
headroom is billed dollar-for-dollar, the remainder at the plan's
post-deductible rule (coinsurance or copay).  Deductible-phase spending
counts toward the OOP maximum.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable


class Setting(str, enum.Enum):
    EMERGENCY_DEPARTMENT = "emergency_department"
    INPATIENT = "inpatient"
    URGENT_CARE = "urgent_care"
    AMBULATORY_SURGERY = "ambulatory_surgery"
    OUTPATIENT_CLINIC = "outpatient_clinic"


class Phase(str, enum.Enum):
    PRE_DEDUCTIBLE = "pre_deductible"
    POST_DEDUCTIBLE = "post_deductible"
    POST_OOP_MAX = "post_oop_max"


class CostSharingMode(str, enum.Enum):
    COINSURANCE = "coinsurance"
    COPAY = "copay"


class SequencingError(ValueError):
    """Claims were fed out of nondecreasing service-date order."""


class MissingCopayError(KeyError):
    """Plan is in copay mode but has no copay for the claim's setting."""


class PlanValidationError(ValueError):
    """Benefit plan parameters violate an invariant."""


@dataclass(frozen=True)
class BenefitPlan:
    """Plan parameters governing the cost-sharing phases.

    Money fields are integer cents.  By default generator calibration the
    family deductible is twice the individual deductible.
    """

    individual_deductible: int
    family_deductible: int
    coinsurance_rate: float
    copay_schedule: dict[Setting, int]
    family_oop_max: int
    cost_sharing_mode: CostSharingMode = CostSharingMode.COINSURANCE

    def __post_init__(self) -> None:
        problems = []
        if not (0 <= self.individual_deductible <= self.family_deductible):
            problems.append("0 <= individual_deductible <= family_deductible")
        if self.family_deductible > self.family_oop_max:
            problems.append("family_deductible <= family_oop_max")
        if not (0.0 <= self.coinsurance_rate <= 1.0):
            problems.append("coinsurance_rate in [0, 1]")
        if any(v < 0 for v in self.copay_schedule.values()):
            problems.append("copays >= 0")
        if problems:
            raise PlanValidationError("; ".join(problems))
        # memoized exact decimal form of the rate for half-up rounding
        object.__setattr__(self, "_rate_decimal", Decimal(str(self.coinsurance_rate)))

    def coinsurance_cents(self, amount_cents: int) -> int:
        """Patient coinsurance share of an amount, rounded half-up to the cent."""
        share = self._rate_decimal * amount_cents  # type: ignore[attr-defined]
        return int(share.quantize(Decimal("1"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class Encounter:
    """One claim: member, date, setting, allowed amount, codes."""

    encounter_id: str
    member_id: str
    family_id: str
    service_date: int  # day offset within the benefit period, 0-364
    setting: Setting
    allowed_amount: int  # cents
    diagnosis_codes: tuple[str, ...] = ()
    procedure_codes: tuple[str, ...] = ()
    cost_sharing_exempt: bool = False

    def __post_init__(self) -> None:
        if self.allowed_amount < 0:
            raise ValueError(f"negative allowed_amount on {self.encounter_id}")
        if not (0 <= self.service_date <= 364):
            raise ValueError(f"service_date outside benefit period on {self.encounter_id}")


@dataclass(frozen=True)
class ClaimAdjudication:
    encounter_id: str
    patient_share: int
    plan_share: int
    phase_at_service: Phase


@dataclass
class CostSharingState:
    """Per-family running accumulators and phase.

    ``family_accumulated`` stops at the family deductible; a member whose
    individual deductible is met contributes nothing further to it.  Met
    dates are immutable once set.
    """

    per_member_accumulated: dict[str, int] = field(default_factory=dict)
    family_accumulated: int = 0
    family_oop_accumulated: int = 0
    phase: Phase = Phase.PRE_DEDUCTIBLE
    family_deductible_met_date: int | None = None
    family_oop_max_met_date: int | None = None
    last_service_date: int = -1

    def copy(self) -> "CostSharingState":
        return CostSharingState(
            per_member_accumulated=dict(self.per_member_accumulated),
            family_accumulated=self.family_accumulated,
            family_oop_accumulated=self.family_oop_accumulated,
            phase=self.phase,
            family_deductible_met_date=self.family_deductible_met_date,
            family_oop_max_met_date=self.family_oop_max_met_date,
            last_service_date=self.last_service_date,
        )


def _post_deductible_share(plan: BenefitPlan, enc: Encounter, remainder: int) -> int:
    """Patient share of the post-deductible remainder of a claim."""
    if remainder <= 0:
        return 0
    if plan.cost_sharing_mode is CostSharingMode.COINSURANCE:
        return plan.coinsurance_cents(remainder)
    try:
        copay = plan.copay_schedule[enc.setting]
    except KeyError:
        raise MissingCopayError(
            f"no copay configured for setting {enc.setting.value}"
        ) from None
    return min(copay, remainder)


def _apply_claim(
    new: CostSharingState, plan: BenefitPlan, enc: Encounter
) -> ClaimAdjudication:
    """Adjudicate one claim, mutating the state in place."""
    if enc.service_date < new.last_service_date:
        raise SequencingError(
            f"claim {enc.encounter_id} on day {enc.service_date} after "
            f"day {new.last_service_date}"
        )
    phase_at_service = new.phase
    new.last_service_date = enc.service_date
    if enc.cost_sharing_exempt or enc.allowed_amount == 0:
        return ClaimAdjudication(enc.encounter_id, 0, enc.allowed_amount, phase_at_service)

    amount = enc.allowed_amount

    deductible_part = 0
    if new.phase is Phase.PRE_DEDUCTIBLE:
        member_acc = new.per_member_accumulated.get(enc.member_id, 0)
        individual_headroom = max(plan.individual_deductible - member_acc, 0)
        family_headroom = plan.family_deductible - new.family_accumulated
        deductible_part = min(amount, individual_headroom, family_headroom)
        if deductible_part > 0:
            new.per_member_accumulated[enc.member_id] = member_acc + deductible_part
            new.family_accumulated += deductible_part
        if new.family_accumulated >= plan.family_deductible:
            # zero-deductible plans flip phase without a met date
            new.phase = Phase.POST_DEDUCTIBLE
            if deductible_part > 0:
                new.family_deductible_met_date = enc.service_date

    remainder = amount - deductible_part
    if new.phase is Phase.POST_OOP_MAX:
        sharing_part = 0
    elif new.phase is Phase.POST_DEDUCTIBLE:
        sharing_part = _post_deductible_share(plan, enc, remainder)
    else:
        # family still under deductible but this member's individual
        # deductible is exhausted: the excess bills at the plan's
        # post-deductible rule
        sharing_part = _post_deductible_share(plan, enc, remainder)

    patient_share = deductible_part + sharing_part
    oop_headroom = plan.family_oop_max - new.family_oop_accumulated
    patient_share = min(patient_share, oop_headroom)
    new.family_oop_accumulated += patient_share
    if (
        new.family_oop_accumulated >= plan.family_oop_max
        and new.family_oop_max_met_date is None
    ):
        new.phase = Phase.POST_OOP_MAX
        new.family_oop_max_met_date = enc.service_date

    return ClaimAdjudication(
        enc.encounter_id, patient_share, enc.allowed_amount - patient_share, phase_at_service
    )


def adjudicate_claim(
    state: CostSharingState, plan: BenefitPlan, enc: Encounter
) -> tuple[ClaimAdjudication, CostSharingState]:
    """Adjudicate one claim against the family's running state.

    Returns the adjudication and the updated state.  The input state is not
    mutated.  Claims must arrive in nondecreasing service-date order.
    """
    new = state.copy()
    adj = _apply_claim(new, plan, enc)
    return adj, new


def canonical_order(encounters: Iterable[Encounter]) -> list[Encounter]:
    """Canonical claim ordering: (service_date, encounter_id)."""
    return sorted(encounters, key=lambda e: (e.service_date, e.encounter_id))


def replay_family_period(
    plan: BenefitPlan, encounters: Iterable[Encounter]
) -> tuple[CostSharingState, list[ClaimAdjudication]]:
    """Fold adjudicate_claim over one family's benefit period.

    Encounters are sorted into canonical order first, so same-day claims
    always adjudicate identically regardless of input permutation.
    """
    ordered = canonical_order(encounters)
    families = {e.family_id for e in ordered}
    if len(families) > 1:
        raise ValueError(f"encounters span multiple families: {sorted(families)}")
    state = CostSharingState()
    adjudications = []
    for enc in ordered:
        adjudications.append(_apply_claim(state, plan, enc))
    return state, adjudications


def write_adjudication_trace(path, adjudications: Iterable[ClaimAdjudication]) -> None:
    """Export an adjudication trace as tab-separated text for debugging."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("encounter_id\tphase_at_service\tpatient_share\tplan_share\n")
        for adj in adjudications:
            fh.write(
                f"{adj.encounter_id}\t{adj.phase_at_service.value}\t"
                f"{adj.patient_share}\t{adj.plan_share}\n"
            )
