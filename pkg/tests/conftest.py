import pytest

from exprag.cohort import Cohort, CodeKind
from exprag.synth import NoteStyle, SynthParams, SyntheticCohort, synthesize_cohort
from tests.helpers import admission
from utils.configs_provider import ConfigProvider


@pytest.fixture
def tiny_cohort() -> Cohort:
    """H1 and H4 share a subject; H2 duplicates H1's codes; H5 shares nothing."""
    records = [
        admission("H1", "S1", {"D1", "D2", "D3"}, {"M1", "M2", "M3"}, {"P1", "P2", "P3"}, "n1"),
        admission("H2", "S2", {"D1", "D2", "D3"}, {"M1", "M2", "M3"}, {"P1", "P2", "P3"}, "n2"),
        admission("H3", "S3", {"D1", "D4", "D5"}, {"M4", "M5", "M6"}, {"P4", "P5", "P6"}, "n3"),
        admission("H4", "S1", {"D1", "D2", "D3"}, {"M1", "M2", "M3"}, {"P1", "P2", "P3"}, "n4"),
        admission("H5", "S5", {"D7", "D8", "D9"}, {"M7", "M8", "M9"}, {"P7", "P8", "P9"}, "n5"),
    ]
    return Cohort(
        admissions={r.admission_key: r for r in records},
        descriptions={
            CodeKind.DIAGNOSIS: {
                "D1": "Hypertension",
                "D2": "Type 2 diabetes",
                "D3": "Anemia",
                "D4": "Gout",
            }
        },
    )


@pytest.fixture(scope="session")
def narrative_cohort() -> SyntheticCohort:
    return synthesize_cohort(SynthParams(seed=7, n_subjects=60))


@pytest.fixture(scope="session")
def sentinel_cohort() -> SyntheticCohort:
    return synthesize_cohort(SynthParams(seed=3, n_subjects=160, note_style=NoteStyle.SENTINEL))


@pytest.fixture(autouse=True)
def fresh_config_provider():
    ConfigProvider.reset()
    yield
    ConfigProvider.reset()
