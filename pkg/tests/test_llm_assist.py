import random

import pytest

from exprag.exceptions import ProviderFailureError, TransportError
from exprag.llm import PromptLibrary, PromptTemplate, ScriptedProvider
from exprag.llm_assist import LlmAnnotator, LlmDistractorSelector, LlmPermuter
from exprag.qa import SeededDistractorSelector, summarize_key_points
from exprag.segmenter import instruction_key_points, segment_note
from tests.helpers import FULL_NOTE

CANDIDATES = ["Anemia", "Gout", "Asthma", "Migraine"]
KEY_POINTS = instruction_key_points(segment_note(FULL_NOTE))


def test_selector_follows_model_choice():
    selector = LlmDistractorSelector(ScriptedProvider(["3, 1"]))
    picked = selector.select("bg", ["Hypertension"], CANDIDATES, 2, random.Random(0))
    assert picked == ["Asthma", "Anemia"]


def test_selector_tops_up_out_of_range_picks():
    selector = LlmDistractorSelector(ScriptedProvider(["2, 9, 2"]))
    picked = selector.select("bg", ["Hypertension"], CANDIDATES, 3, random.Random(0))
    assert picked[0] == "Gout"
    assert len(set(picked)) == 3
    assert set(picked) <= set(CANDIDATES)


def test_selector_falls_back_to_seeded_sampling():
    selector = LlmDistractorSelector(ScriptedProvider([TransportError("down")]))
    picked = selector.select("bg", ["Hypertension"], CANDIDATES, 2, random.Random(5))
    expected = SeededDistractorSelector().select(
        "bg", ["Hypertension"], CANDIDATES, 2, random.Random(5)
    )
    assert picked == expected


def test_permuter_uses_model_lines_then_rules():
    reply = "\n".join(
        [
            "1. Take Lisinopril 40 mg every evening.",
            "2. Take Lisinopril 40 mg every evening.",
            f"3. {summarize_key_points(KEY_POINTS)}",
        ]
    )
    permuter = LlmPermuter(ScriptedProvider([reply]))
    permuted = permuter.permute(KEY_POINTS, 3, random.Random(0), ["Metoprolol"])
    assert permuted[0] == "Take Lisinopril 40 mg every evening."
    assert len(permuted) == 3
    assert summarize_key_points(KEY_POINTS) not in permuted
    assert len(set(permuted)) == 3


def test_permuter_falls_back_on_provider_failure():
    permuter = LlmPermuter(ScriptedProvider([TransportError("down")]))
    permuted = permuter.permute(KEY_POINTS, 3, random.Random(0), [])
    assert len(permuted) == 3


def test_annotator_parses_modality_scores(tiny_cohort):
    reply = "diagnoses: 0.8, medications: 0.2, procedures: 1"
    annotator = LlmAnnotator(ScriptedProvider([reply]))
    assert annotator.name == "llm:mock:scripted"
    h1, h3 = tiny_cohort.get("H1"), tiny_cohort.get("H3")
    assert annotator.annotate(h1, h3, tiny_cohort) == (0.8, 0.2, 1.0)
    assert annotator.score(h1, h3, tiny_cohort) == pytest.approx(2 / 3)


def test_annotator_rejects_incomplete_reply(tiny_cohort):
    annotator = LlmAnnotator(ScriptedProvider(["They look alike."]))
    with pytest.raises(ProviderFailureError):
        annotator.annotate(tiny_cohort.get("H1"), tiny_cohort.get("H2"), tiny_cohort)


def test_annotator_describes_codes(tiny_cohort):
    text = LlmAnnotator.describe(tiny_cohort.get("H1"), tiny_cohort)
    assert text.splitlines() == [
        "diagnosis: Hypertension; Type 2 diabetes; Anemia",
        "medication: none",
        "procedure: none",
    ]


def test_library_overrides_helper_template():
    custom = PromptTemplate(template_id="custom", system="s", user="{target} vs {candidate}")
    library = PromptLibrary(extras={"pair_annotate": custom})
    annotator = LlmAnnotator(ScriptedProvider(["x"]), library=library)
    assert annotator.template == custom
