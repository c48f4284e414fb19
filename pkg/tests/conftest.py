"""Shared test helpers: compact factories for trials and scripted backends."""

from __future__ import annotations

import pytest

from trialmatch.gateway import BackendConfig, BackendKind
from trialmatch.ingest import ClinicalTrial, Location, Phase, Sex, StudyType, TrialStatus


def make_trial(
    nct_id: str = "NCT00000001",
    *,
    title_brief: str = "",
    title_official: str = "",
    summary_brief: str = "",
    description_detailed: str = "",
    eligibility_text: str = "",
    status: TrialStatus = TrialStatus.RECRUITING,
    study_type: StudyType = StudyType.INTERVENTIONAL,
    phase=None,
    sex: Sex = Sex.ALL,
    min_age_years=None,
    max_age_years=None,
    conditions=(),
    countries=(),
    keywords=(),
) -> ClinicalTrial:
    return ClinicalTrial(
        nct_id=nct_id,
        title_brief=title_brief,
        title_official=title_official,
        summary_brief=summary_brief,
        description_detailed=description_detailed,
        eligibility_text=eligibility_text,
        status=status,
        study_type=study_type,
        phase=frozenset(phase) if phase else None,
        sex=sex,
        min_age_years=min_age_years,
        max_age_years=max_age_years,
        conditions=list(conditions),
        locations=[Location(facility="Center", city="City", country=c) for c in countries],
        keywords=list(keywords),
    )


def mock_backend(script: dict, max_retries: int = 2) -> BackendConfig:
    return BackendConfig(kind=BackendKind.SCRIPTED_MOCK, script=script, max_retries=max_retries)


@pytest.fixture
def trial_factory():
    return make_trial


@pytest.fixture
def backend_factory():
    return mock_backend
