"""Regenerate the packaged TSV code tables.

Run from the repo root:  python tools/make_data_files.py
"""

import hashlib
from pathlib import Path

DATA = Path(__file__).resolve().parent.parent / "src" / "deductible_iv" / "data"

# (group id, category, member 3-char codes, sampled injury count)
INJURY_GROUPS = [
    ("S00-S09", "Injuries to the head", [f"S0{i}" for i in range(10)], 1944),
    ("S10-S19", "Injuries to the neck", [f"S1{i}" for i in range(8)] + ["S19"], 374),
    ("S20-S29", "Injuries to the thorax", [f"S2{i}" for i in range(10)], 239),
    (
        "S30-S39",
        "Injuries to the abdomen, lower back, lumbar spine, pelvis and external genitals",
        [f"S3{i}" for i in range(10)],
        368,
    ),
    ("S40-S49", "Injuries to the shoulder and upper arm", [f"S4{i}" for i in range(10)], 552),
    ("S50-S59", "Injuries to the elbow and forearm", [f"S5{i}" for i in range(10)], 788),
    ("S60-S69", "Injuries to the wrist, hand and fingers", [f"S6{i}" for i in range(10)], 1407),
    ("S70-S79", "Injuries to the hip and thigh", [f"S7{i}" for i in range(10)], 190),
    ("S80-S89", "Injuries to the knee and lower leg", [f"S8{i}" for i in range(10)], 849),
    ("S90-S99", "Injuries to the ankle and foot", [f"S9{i}" for i in range(10)], 775),
    ("T07", "Injuries involving multiple body regions", ["T07"], 19),
    ("T14", "Injury of unspecified body region", ["T14"], 208),
    (
        "T15-T19",
        "Effects of foreign body entering through natural orifice",
        ["T15", "T16", "T17", "T18", "T19"],
        258,
    ),
    (
        "T20-T25",
        "Burns and corrosions of external body surface, specified by site",
        ["T20", "T21", "T22", "T23", "T24", "T25"],
        37,
    ),
    (
        "T26-T28",
        "Burns and corrosions confined to eye and internal organs",
        ["T26", "T27", "T28"],
        3,
    ),
    (
        "T30-T32",
        "Burns and corrosions of multiple and unspecified body regions",
        ["T30", "T31", "T32"],
        50,
    ),
    ("T34", "Frostbite", ["T34"], 1),
    (
        "T51-T65",
        "Toxic effects of substances chiefly nonmedicinal as to source",
        [f"T{i}" for i in range(52, 66)],
        107,
    ),
    (
        "T66-T78",
        "Other and unspecified effects of external causes",
        ["T66", "T67", "T68", "T69", "T70"],
        422,
    ),
    ("T79", "Certain early complications of trauma", ["T79"], 35),
]

# population severity counts for scores 1..6
AIS_COUNTS = [6290, 1718, 539, 50, 29, 0]
AIS_TOTAL = sum(AIS_COUNTS)
# groups whose conditional severity skews high (head trauma, femur/hip,
# thoracic organ injury); everyone else shares the compensating table so the
# group-weighted mixture equals the population marginal exactly
SEVERE_GROUPS = {"S00-S09", "S70-S79", "S20-S29"}
SEVERE_CONDITIONAL = [0.60, 0.26, 0.11, 0.018, 0.012, 0.0]

OUTCOME_CODES = [
    ("emergency_department", "setting", "emergency_department"),
    ("inpatient", "setting", "inpatient"),
    ("urgent_care", "setting", "urgent_care"),
    ("ambulatory_surgery", "setting", "ambulatory_surgery"),
    ("outpatient_clinic", "setting", "outpatient_clinic"),
    *[
        ("office_visit", "procedure", c)
        for c in ("99202", "99203", "99204", "99205", "99211", "99212", "99213", "99214", "99215")
    ],
    ("venipuncture", "procedure", "36415"),
    *[("physical_therapy", "procedure", c) for c in ("97110", "97112", "97140", "97530")],
    *[
        ("mammography", "procedure", c)
        for c in ("76083", "76090", "76091", "76092", "77052", "77057", "77067", "G0202")
    ],
    *[("wellness", "procedure", c) for c in ("99385", "99386", "99395", "99396")],
]

COMORBIDITY_MAP = [
    ("congestive_heart_failure", "I50"),
    ("cardiac_arrhythmias", "I49"),
    ("valvular_disease", "I34"),
    ("pulmonary_circulation_disorders", "I26"),
    ("peripheral_vascular_disorders", "I71"),
    ("hypertension_uncomplicated", "I10"),
    ("hypertension_complicated", "I11"),
    ("paralysis", "G81"),
    ("other_neurological_disorders", "G40"),
    ("chronic_pulmonary_disease", "J44"),
    ("diabetes_uncomplicated", "E11"),
    ("diabetes_complicated", "E13"),
    ("hypothyroidism", "E03"),
    ("renal_failure", "N18"),
    ("liver_disease", "K74"),
    ("peptic_ulcer_disease", "K27"),
    ("aids_hiv", "B20"),
    ("lymphoma", "C85"),
    ("metastatic_cancer", "C78"),
    ("solid_tumor_without_metastasis", "C18"),
    ("rheumatoid_arthritis", "M05"),
    ("coagulopathy", "D68"),
    ("obesity", "E66"),
    ("weight_loss", "E43"),
    ("fluid_electrolyte_disorders", "E87"),
    ("blood_loss_anemia", "D50"),
    ("deficiency_anemia", "D51"),
    ("alcohol_abuse", "F10"),
    ("drug_abuse", "F11"),
    ("psychoses", "F20"),
    ("depression", "F32"),
]

# ED presenting-condition scorer: draw_weight is the generator's sampling
# frequency for non-injury ED visits; the four probabilities are the
# synthetic urgency/avoidability scores
ED_WEIGHTS = [
    # group, description, draw_weight, p_nonemergent_avoidable, p_pc_treatable,
    # p_preventable, p_unavoidable
    ("J06", "acute upper respiratory infection", 0.10, 0.55, 0.40, 0.05, 0.00),
    ("M54", "dorsalgia", 0.08, 0.45, 0.45, 0.05, 0.05),
    ("R51", "headache", 0.06, 0.40, 0.45, 0.05, 0.10),
    ("R07", "pain in throat and chest", 0.16, 0.00, 0.30, 0.10, 0.60),
    ("R10", "abdominal and pelvic pain", 0.14, 0.00, 0.45, 0.15, 0.40),
    ("J18", "pneumonia", 0.08, 0.00, 0.10, 0.30, 0.60),
    ("R55", "syncope and collapse", 0.07, 0.00, 0.25, 0.15, 0.60),
    ("N39", "urinary tract infection", 0.10, 0.00, 0.60, 0.20, 0.20),
    ("R06", "abnormalities of breathing", 0.09, 0.00, 0.20, 0.20, 0.60),
    ("K92", "gastrointestinal hemorrhage", 0.05, 0.00, 0.05, 0.15, 0.80),
    ("A41", "sepsis", 0.04, 0.00, 0.00, 0.10, 0.90),
    ("I63", "cerebral infarction", 0.03, 0.00, 0.00, 0.05, 0.95),
]


def write_table(name: str, header: list[str], rows: list[list[str]]) -> None:
    body = "\t".join(header) + "\n"
    body += "".join("\t".join(str(c) for c in row) + "\n" for row in rows)
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    path = DATA / name
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# deductible-iv table v1 sha256={digest}\n")
        fh.write(body)
    print(f"wrote {path}")


def main() -> None:
    DATA.mkdir(parents=True, exist_ok=True)

    rows = []
    for group, category, codes, count in INJURY_GROUPS:
        for code in codes:
            rows.append([code, group, category, count])
    write_table("injury_groups.tsv", ["icd10_3char", "group", "category", "group_count"], rows)

    marginal = [c / AIS_TOTAL for c in AIS_COUNTS]
    weights = {g: c / AIS_TOTAL for g, _, _, c in [(r[0], r[1], r[2], r[3]) for r in INJURY_GROUPS]}
    w_severe = sum(weights[g] for g in SEVERE_GROUPS)
    assert abs(sum(SEVERE_CONDITIONAL) - 1.0) < 1e-12
    other = [
        (m - w_severe * s) / (1.0 - w_severe) for m, s in zip(marginal, SEVERE_CONDITIONAL)
    ]
    assert all(p >= 0 for p in other), other
    assert abs(sum(other) - 1.0) < 1e-9
    ais_rows = []
    for group, _, _, _ in INJURY_GROUPS:
        cond = SEVERE_CONDITIONAL if group in SEVERE_GROUPS else other
        ais_rows.append([group] + [f"{p:.10f}" for p in cond])
    write_table(
        "ais_severity.tsv",
        ["group", "p1", "p2", "p3", "p4", "p5", "p6"],
        ais_rows,
    )

    write_table("outcome_codes.tsv", ["outcome", "kind", "value"], [list(r) for r in OUTCOME_CODES])
    write_table("comorbidity_map.tsv", ["condition", "icd10_3char"], [list(r) for r in COMORBIDITY_MAP])

    assert abs(sum(r[2] for r in ED_WEIGHTS) - 1.0) < 1e-9
    flagged = sum(r[2] for r in ED_WEIGHTS if r[3] > 0)
    print(f"flagged ED draw mass: {flagged:.3f}")
    write_table(
        "avoidable_ed_weights.tsv",
        [
            "group",
            "description",
            "draw_weight",
            "p_nonemergent_avoidable",
            "p_pc_treatable",
            "p_preventable",
            "p_unavoidable",
        ],
        [[r[0], r[1], f"{r[2]:.4f}", f"{r[3]:.4f}", f"{r[4]:.4f}", f"{r[5]:.4f}", f"{r[6]:.4f}"] for r in ED_WEIGHTS],
    )


if __name__ == "__main__":
    main()
