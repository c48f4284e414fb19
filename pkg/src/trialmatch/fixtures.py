"""Deterministic fixtures: a synthetic trial corpus with planted targets,
scripted gateway responses to drive the pipeline offline, and the
annotation benchmark used by the evaluation suite.

Everything here is seeded and reproducible; no network, no model.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .criteria import Verdict
from .evalkit import Adjudication, KeyedVerdict, ReferenceVerdict
from .ingest import PatientRecord

FUNNEL_SEED = 20240513
FAMILY_SIZE = 33
N_EXTRA_TRIALS = 5

SHARED_ELIGIBILITY_TEXT = """Inclusion Criteria:
- Age 18 years or older at enrollment
- ECOG performance status 0-1
- Adequate organ function:
  - Absolute neutrophil count >= 1,500/mcL
  - Platelets >= 100,000/mcL
  - Hemoglobin >= 9 g/dL
- Measurable disease per RECIST 1.1
- Life expectancy of at least 12 weeks

Exclusion Criteria:
- Active brain metastases
- Prior organ transplantation
"""

STRUCTURE_INCLUSION_RESPONSE = [
    {"text": "Age 18 years or older at enrollment"},
    {"text": "ECOG performance status 0-1"},
    {
        "text": "Adequate organ function:",
        "connector": "ALL",
        "children": [
            {"text": "Absolute neutrophil count >= 1,500/mcL"},
            {"text": "Platelets >= 100,000/mcL"},
            {"text": "Hemoglobin >= 9 g/dL"},
        ],
    },
    {"text": "Measurable disease per RECIST 1.1"},
    {"text": "Life expectancy of at least 12 weeks"},
]

STRUCTURE_EXCLUSION_RESPONSE = [
    {"text": "Active brain metastases"},
    {"text": "Prior organ transplantation"},
]

# 7 inclusion leaves (incl. one nested group of 3) + 2 exclusion leaves.
# Criterion rows shown to annotators: 5 inclusion top-level + 3 children
# + 2 exclusion = 10 per trial.
LEAVES_PER_TRIAL = 9


@dataclass(frozen=True)
class DiseaseProfile:
    patient_id: str
    disease: str
    mutation: str
    drug: str
    country: str


FUNNEL_PROFILES: tuple[DiseaseProfile, ...] = (
    DiseaseProfile("fp-01", "non-small cell lung adenocarcinoma", "KRAS G12C", "sotorasib", "Germany"),
    DiseaseProfile("fp-02", "metastatic uveal melanoma", "GNAQ Q209L", "tebentafusp", "France"),
    DiseaseProfile("fp-03", "relapsed diffuse large B-cell lymphoma", "CD19 positive", "loncastuximab", "United States"),
    DiseaseProfile("fp-04", "pancreatic ductal adenocarcinoma", "KRAS G12D", "gemcitabine", "Germany"),
    DiseaseProfile("fp-05", "triple negative breast carcinoma", "BRCA1 germline", "talazoparib", "Spain"),
    DiseaseProfile("fp-06", "castration resistant prostate cancer", "AR-V7 splice variant", "enzalutamide", "Italy"),
    DiseaseProfile("fp-07", "clear cell renal cell carcinoma", "VHL inactivation", "belzutifan", "Germany"),
    DiseaseProfile("fp-08", "glioblastoma multiforme", "EGFRvIII rearrangement", "depatuxizumab", "Austria"),
    DiseaseProfile("fp-09", "hepatocellular carcinoma", "TERT promoter", "atezolizumab", "France"),
    DiseaseProfile("fp-10", "colorectal carcinoma with microsatellite instability", "MLH1 deficient", "pembrolizumab", "Germany"),
    DiseaseProfile("fp-11", "cutaneous squamous cell carcinoma", "PD-L1 high", "cemiplimab", "United States"),
    DiseaseProfile("fp-12", "epithelial ovarian carcinoma", "BRCA2 somatic", "olaparib", "Netherlands"),
    DiseaseProfile("fp-13", "gastric signet ring cell carcinoma", "HER2 amplified", "trastuzumab", "Germany"),
    DiseaseProfile("fp-14", "intrahepatic cholangiocarcinoma", "FGFR2 fusion", "pemigatinib", "Switzerland"),
    DiseaseProfile("fp-15", "anaplastic thyroid carcinoma", "BRAF V600E", "dabrafenib", "Germany"),
)

_DISTRACTOR_DRUGS = (
    "varlitinib", "navitoclax", "ensartinib", "rucaparib", "spartalizumab",
    "tivozanib", "selumetinib", "capmatinib", "adagrasib", "datopotamab",
    "zanubrutinib", "futibatinib", "sitravatinib", "lurbinectedin", "tisotumab",
    "mirvetuximab", "amivantamab", "mobocertinib", "infigratinib", "erdafitinib",
    "ramucirumab", "regorafenib", "cabozantinib", "lenvatinib", "axitinib",
    "vorolanib", "surufatinib", "fruquintinib", "anlotinib", "apatinib",
    "pamiparib", "fluzoparib",
)

_FILLER_COUNTRIES = ("Germany", "France", "United States", "Spain", "Italy", "Poland", "Sweden")


def target_nct_id(family: int) -> str:
    return f"NCT{family:02d}000001"


def _member_nct_id(family: int, member: int) -> str:
    return f"NCT{family:02d}{member:03d}001"


def patient_queries(profile: DiseaseProfile) -> list[str]:
    return [
        f"first-line treatment of {profile.disease} with {profile.mutation} mutation in adults",
        f"{profile.disease} {profile.mutation} advanced stage {profile.drug} study",
        f"targeted therapy options for {profile.disease}",
    ]


def _registry_document(
    nct_id: str,
    brief_title: str,
    official_title: str,
    summary: str,
    description: str,
    conditions: list[str],
    keywords: list[str],
    country: str,
    status: str = "RECRUITING",
) -> dict:
    return {
        "protocolSection": {
            "identificationModule": {
                "nctId": nct_id,
                "briefTitle": brief_title,
                "officialTitle": official_title,
            },
            "statusModule": {"overallStatus": status},
            "descriptionModule": {"briefSummary": summary, "detailedDescription": description},
            "designModule": {"studyType": "INTERVENTIONAL", "phases": ["PHASE2"]},
            "conditionsModule": {"conditions": conditions, "keywords": keywords},
            "eligibilityModule": {
                "eligibilityCriteria": SHARED_ELIGIBILITY_TEXT,
                "sex": "ALL",
                "minimumAge": "18 Years",
                "maximumAge": "99 Years",
            },
            "contactsLocationsModule": {
                "locations": [{"facility": "Study Center", "city": "Site", "country": country}]
            },
        }
    }


def build_funnel_corpus(seed: int = FUNNEL_SEED) -> list[dict]:
    """500 registry documents: 15 disease families of 33 trials (member 0 is
    the planted target, textually close to the family patient's queries)
    plus 5 generic distractors."""
    rng = random.Random(seed)
    documents: list[dict] = []
    for family, profile in enumerate(FUNNEL_PROFILES):
        queries = patient_queries(profile)
        target_summary = (
            f"This study evaluates {queries[0]}. "
            f"Participants receive {profile.drug} until progression. "
            f"{queries[1]} cohorts enroll in parallel."
        )
        documents.append(
            _registry_document(
                nct_id=target_nct_id(family),
                brief_title=f"{profile.drug.capitalize()} for {profile.disease}",
                official_title=f"A Phase 2 Study of {profile.drug.capitalize()} in {profile.disease} with {profile.mutation}",
                summary=target_summary,
                description=f"Open-label single-arm study of {profile.drug} for {profile.disease}. "
                f"Eligible participants carry a {profile.mutation} alteration.",
                conditions=[profile.disease],
                keywords=[profile.mutation],
                country=profile.country,
            )
        )
        for member in range(1, FAMILY_SIZE):
            drug = _DISTRACTOR_DRUGS[(member - 1) % len(_DISTRACTOR_DRUGS)]
            filler = " ".join(rng.choice(_DISTRACTOR_DRUGS) for _ in range(3))
            documents.append(
                _registry_document(
                    nct_id=_member_nct_id(family, member),
                    brief_title=f"{drug.capitalize()} in {profile.disease}",
                    official_title=f"Randomized Evaluation of {drug.capitalize()} Versus Standard Care in {profile.disease}",
                    summary=(
                        f"Patients with previously treated {profile.disease} receive {drug} after progression "
                        f"on standard regimens. Secondary endpoints include quality of life and safety. {filler}."
                    ),
                    description=f"Multicenter comparison of {drug} dosing schedules. {filler}.",
                    conditions=[profile.disease],
                    keywords=[drug],
                    country=rng.choice(_FILLER_COUNTRIES),
                )
            )
    for extra in range(N_EXTRA_TRIALS):
        drug = _DISTRACTOR_DRUGS[extra]
        documents.append(
            _registry_document(
                nct_id=f"NCT9900000{extra + 1}",
                brief_title=f"Basket Study of {drug.capitalize()}",
                official_title=f"A Basket Study of {drug.capitalize()} in Advanced Solid Tumors",
                summary=f"Tumor-agnostic basket evaluation of {drug} in heavily pretreated participants.",
                description="Basket design across histologies with biomarker-driven enrollment.",
                conditions=["advanced solid tumor"],
                keywords=[drug],
                country="United States",
            )
        )
    return documents


def funnel_patients() -> list[PatientRecord]:
    patients = []
    for profile in FUNNEL_PROFILES:
        text = (
            f"Patient Information\n"
            f"Diagnosis: {profile.disease}, stage IV, first diagnosed after persistent symptoms.\n"
            f"Molecular profile: {profile.mutation}.\n"
            f"Performance status: ECOG 1.\n"
            f"Prior treatment: none for the current diagnosis.\n"
            f"Comorbidities: well controlled, none contraindicating systemic therapy.\n"
            f"Recent labs: neutrophils 2,100/mcL, platelets 180,000/mcL, bilirubin normal.\n"
            f"Imaging: measurable disease per RECIST 1.1, no brain lesions documented.\n"
            f"Tumor board recommendation: evaluate clinical trial options in {profile.country}."
        )
        patients.append(PatientRecord(patient_id=profile.patient_id, ehr_text=text, label=profile.disease))
    return patients


def funnel_profile(patient_id: str) -> DiseaseProfile:
    for profile in FUNNEL_PROFILES:
        if profile.patient_id == patient_id:
            return profile
    raise KeyError(patient_id)


def funnel_target(patient_id: str) -> str:
    for family, profile in enumerate(FUNNEL_PROFILES):
        if profile.patient_id == patient_id:
            return target_nct_id(family)
    raise KeyError(patient_id)


def build_funnel_script(patient_id: str, n_screened: int = 40, n_trials_evaluated: int = 12) -> dict[str, list]:
    """Scripted gateway queues for one patient's end-to-end run.

    Queues are padded generously; leftovers are simply never consumed.
    """
    profile = funnel_profile(patient_id)
    extract_response = {
        "status_in": ["RECRUITING"],
        "study_type_in": ["INTERVENTIONAL"],
        "condition_terms": [profile.disease],
    }
    screen_response = {
        "decision": "keep",
        "reasoning": f"Trial population includes {profile.disease}; scripted fixture keep.",
    }
    evaluate_response = {
        "verdict": "eligible",
        "reasoning": "Scripted fixture: criterion satisfied by the patient record.",
    }
    return {
        "EXTRACT_QUERY": [extract_response],
        "REWRITE_QUERIES": [patient_queries(profile)],
        "SCREEN_RELEVANCE": [screen_response] * n_screened,
        "STRUCTURE_CRITERIA": [STRUCTURE_INCLUSION_RESPONSE, STRUCTURE_EXCLUSION_RESPONSE] * n_trials_evaluated,
        "EVALUATE_CRITERION": [evaluate_response] * (LEAVES_PER_TRIAL * n_trials_evaluated),
    }


def write_fixture_workspace(root: str | Path, patient_id: str = "fp-01") -> dict[str, Path]:
    """Materialize a runnable workspace: trial documents, patients, a gateway
    script for one patient, and a service config wired for the mock stack."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    trials_path = root / "trials.ndjson"
    with open(trials_path, "w", encoding="utf-8") as fh:
        for doc in build_funnel_corpus():
            fh.write(json.dumps(doc, ensure_ascii=False) + "\n")
    patients_path = root / "patients.ndjson"
    with open(patients_path, "w", encoding="utf-8") as fh:
        for patient in funnel_patients():
            record = {"patient_id": patient.patient_id, "ehr_text": patient.ehr_text, "label": patient.label}
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    script_path = root / "script.json"
    script_path.write_text(json.dumps(build_funnel_script(patient_id), indent=2), encoding="utf-8")
    store_dir = root / "store"
    runs_dir = root / "runs"
    config = {
        "store_dir": str(store_dir),
        "patients_file": str(patients_path),
        "runs_dir": str(runs_dir),
        "backend": {"kind": "SCRIPTED_MOCK", "script_file": str(script_path), "max_retries": 2},
        "embedding": {"provider": "mock", "dim": 256, "seed": 11},
        "chunking": {"max_chunk_chars": 600, "overlap_chars": 50},
        "pipeline": {
            "top_k_retrieval": 20,
            "max_queries": 5,
            "max_final_trials": 10,
            "include_active_not_recruiting": True,
        },
    }
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config, indent=2), encoding="utf-8")
    return {
        "root": root,
        "trials": trials_path,
        "patients": patients_path,
        "script": script_path,
        "config": config_path,
        "store_dir": store_dir,
        "runs_dir": runs_dir,
    }


# ---------------------------------------------------------------------------
# Annotation benchmark (fixed-arithmetic fixture)
# ---------------------------------------------------------------------------

N_BENCHMARK_PAIRS = 1589
N_BENCHMARK_AGREE = 1398
N_BENCHMARK_DISCREPANT = N_BENCHMARK_PAIRS - N_BENCHMARK_AGREE  # 191
N_BENCHMARK_CHANGED = 75
N_BENCHMARK_UNCHANGED = N_BENCHMARK_DISCREPANT - N_BENCHMARK_CHANGED  # 116

# Accepted-AI transitions (prior -> model verdict) among the 75 changed keys.
_CHANGED_TRANSITIONS = (
    (Verdict.ELIGIBLE, Verdict.UNKNOWN, 56),
    (Verdict.ELIGIBLE, Verdict.INELIGIBLE, 8),
    (Verdict.INELIGIBLE, Verdict.ELIGIBLE, 6),
    (Verdict.INELIGIBLE, Verdict.UNKNOWN, 5),
)

_UNEQUAL_PAIRS = (
    (Verdict.ELIGIBLE, Verdict.INELIGIBLE),
    (Verdict.ELIGIBLE, Verdict.UNKNOWN),
    (Verdict.INELIGIBLE, Verdict.ELIGIBLE),
    (Verdict.INELIGIBLE, Verdict.UNKNOWN),
    (Verdict.UNKNOWN, Verdict.ELIGIBLE),
    (Verdict.UNKNOWN, Verdict.INELIGIBLE),
)


def build_annotation_benchmark(
    seed: int = FUNNEL_SEED,
) -> tuple[list[ReferenceVerdict], list[KeyedVerdict], list[Adjudication]]:
    """1,589 reference/model criterion pairs with 1,398 agreements; 191
    adjudications of which 75 accept the model's answer and 116 confirm the
    prior, so the refined reference agrees on 1,473 pairs."""
    rng = random.Random(seed)
    keys: list[tuple[str, str, str]] = []
    per_case = [32 if i < 8 else 31 for i in range(51)]  # 8*32 + 43*31 = 1589
    for case_index, n_nodes in enumerate(per_case):
        patient_id = f"case-{case_index + 1:02d}"
        nct_id = f"NCT{77000 + case_index:08d}"
        n_inclusion = (n_nodes * 2 + 2) // 3
        for node_index in range(n_nodes):
            if node_index < n_inclusion:
                node_id = f"inc.{node_index + 1}"
            else:
                node_id = f"exc.{node_index - n_inclusion + 1}"
            keys.append((patient_id, nct_id, node_id))
    assert len(keys) == N_BENCHMARK_PAIRS

    discrepant_indices = sorted(rng.sample(range(N_BENCHMARK_PAIRS), N_BENCHMARK_DISCREPANT))
    discrepant_set = set(discrepant_indices)

    discrepant_assignments: list[tuple[Verdict, Verdict, bool]] = []
    for prior, model_verdict, count in _CHANGED_TRANSITIONS:
        discrepant_assignments.extend([(prior, model_verdict, True)] * count)
    for _ in range(N_BENCHMARK_UNCHANGED):
        prior, model_verdict = rng.choice(_UNEQUAL_PAIRS)
        discrepant_assignments.append((prior, model_verdict, False))
    rng.shuffle(discrepant_assignments)

    reference: list[ReferenceVerdict] = []
    model: list[KeyedVerdict] = []
    adjudications: list[Adjudication] = []
    agree_pool = [Verdict.ELIGIBLE] * 7 + [Verdict.INELIGIBLE] * 2 + [Verdict.UNKNOWN]
    cursor = 0
    for index, key in enumerate(keys):
        patient_id, nct_id, node_id = key
        if index in discrepant_set:
            prior, model_verdict, accept_model = discrepant_assignments[cursor]
            cursor += 1
            reference.append(ReferenceVerdict(patient_id, nct_id, node_id, prior))
            model.append(KeyedVerdict(patient_id, nct_id, node_id, model_verdict))
            final = model_verdict if accept_model else prior
            note = "accepted model reasoning" if accept_model else "confirmed original annotation"
            adjudications.append(Adjudication(patient_id, nct_id, node_id, final, note))
        else:
            verdict = rng.choice(agree_pool)
            reference.append(ReferenceVerdict(patient_id, nct_id, node_id, verdict))
            model.append(KeyedVerdict(patient_id, nct_id, node_id, verdict))
    return reference, model, adjudications
