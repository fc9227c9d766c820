"""LLM-backed stand-ins for the rule-based generation helpers and the oracle annotator."""

import logging
import random
import re
from collections.abc import Sequence
from typing import override

from exprag.cohort import AdmissionRecord, Cohort, CodeKind
from exprag.exceptions import (
    AuthRejectedError,
    ContextTooLongError,
    ProviderFailureError,
    TransportError,
)
from exprag.harness import PairAnnotator
from exprag.llm import (
    ChatProvider,
    PromptLibrary,
    PromptTemplate,
    ProviderSettings,
    complete,
    render_template,
)
from exprag.qa import (
    DistractorSelector,
    InstructionPermuter,
    RuleBasedPermuter,
    SeededDistractorSelector,
    summarize_key_points,
)
from exprag.segmenter import normalize_text

logger = logging.getLogger(__name__)

_ANALYST = "You are a clinical documentation specialist helping build an exam for clinicians."

DEFAULT_EXTRAS: dict[str, PromptTemplate] = {
    "distractor_select": PromptTemplate(
        template_id="distractor-select",
        system=_ANALYST,
        user=(
            "Patient background:\n{background}\n\n"
            "Correct answers:\n{gold}\n\n"
            "Candidate wrong answers:\n{candidates}\n\n"
            "Pick the {count} candidates that are most plausible yet wrong for this patient. "
            "Reply with their numbers separated by commas."
        ),
    ),
    "instruction_permute": PromptTemplate(
        template_id="instruction-permute",
        system=_ANALYST,
        user=(
            "Discharge instructions given to the patient:\n{summary}\n\n"
            "Medications the patient takes:\n{substitutes}\n\n"
            "Write {count} alternative instruction summaries that look plausible but are wrong: "
            "swap doses, days or drugs, or reverse an instruction. One summary per line."
        ),
    ),
    "pair_annotate": PromptTemplate(
        template_id="pair-annotate",
        system=_ANALYST,
        user=(
            "Patient 1\n{target}\n\nPatient 2\n{candidate}\n\n"
            "Rate how similar the two patients are for diagnoses, medications and procedures, "
            "each between 0 and 1. Reply exactly as "
            "'diagnoses: <x>, medications: <y>, procedures: <z>'."
        ),
    ),
}

_PROVIDER_ERRORS = (TransportError, AuthRejectedError, ContextTooLongError, ProviderFailureError)


class _LlmHelper:
    template_key: str

    def __init__(
        self,
        provider: ChatProvider,
        settings: ProviderSettings | None = None,
        library: PromptLibrary | None = None,
    ):
        self.provider = provider
        self.settings = settings or ProviderSettings()
        library = library or PromptLibrary()
        self.template = library.extras.get(self.template_key, DEFAULT_EXTRAS[self.template_key])

    def ask(self, **fields: str) -> str:
        messages = render_template(self.template, fields)
        exchange = complete(self.settings.request(messages), self.provider, self.settings.retry)
        return exchange.response.text


def _numbered(lines: Sequence[str]) -> str:
    return "\n".join(f"{i}. {line}" for i, line in enumerate(lines, start=1))


class LlmDistractorSelector(_LlmHelper, DistractorSelector):
    """Lets the model pick the most confusable distractors; seeded picks fill any gap."""

    template_key = "distractor_select"

    @override
    def select(
        self,
        background: str,
        gold: Sequence[str],
        candidates: Sequence[str],
        count: int,
        rng: random.Random,
    ) -> list[str]:
        try:
            reply = self.ask(
                background=background,
                gold=_numbered(gold),
                candidates=_numbered(candidates),
                count=str(count),
            )
        except _PROVIDER_ERRORS as e:
            logger.warning("Distractor selection fell back to seeded sampling: %s", e)
            reply = ""
        picked: list[str] = []
        for number in re.findall(r"\d+", reply):
            index = int(number) - 1
            if 0 <= index < len(candidates) and candidates[index] not in picked:
                picked.append(candidates[index])
            if len(picked) == count:
                return picked
        rest = [c for c in candidates if c not in picked]
        return picked + SeededDistractorSelector().select(
            background, gold, rest, count - len(picked), rng
        )


class LlmPermuter(_LlmHelper, InstructionPermuter):
    """Asks the model for wrong instruction summaries; rule-based edits top up the rest."""

    template_key = "instruction_permute"

    def __init__(
        self,
        provider: ChatProvider,
        settings: ProviderSettings | None = None,
        library: PromptLibrary | None = None,
        fallback: InstructionPermuter | None = None,
    ):
        super().__init__(provider, settings, library)
        self.fallback = fallback or RuleBasedPermuter()

    @override
    def permute(
        self, key_points: Sequence[str], count: int, rng: random.Random, substitutes: Sequence[str]
    ) -> list[str]:
        gold = summarize_key_points(key_points)
        try:
            reply = self.ask(
                summary=gold, substitutes=", ".join(substitutes) or "none", count=str(count)
            )
        except _PROVIDER_ERRORS as e:
            logger.warning("Instruction permutation fell back to rule-based edits: %s", e)
            reply = ""
        seen = {normalize_text(gold)}
        permuted: list[str] = []
        for line in reply.splitlines():
            text = re.sub(r"^\s*(?:\d+[.)]|[-*])\s*", "", line).strip()
            if text and normalize_text(text) not in seen:
                seen.add(normalize_text(text))
                permuted.append(text)
            if len(permuted) == count:
                return permuted
        for text in self.fallback.permute(key_points, count, rng, substitutes):
            if len(permuted) == count:
                break
            if normalize_text(text) not in seen:
                seen.add(normalize_text(text))
                permuted.append(text)
        return permuted


_SCORE = re.compile(
    r"(diagnos\w*|medication\w*|procedure\w*)\s*[:=]\s*([01](?:\.\d+)?|\.\d+)", re.IGNORECASE
)


class LlmAnnotator(_LlmHelper, PairAnnotator):
    """Model-judged similarity of two admissions from their code descriptions."""

    template_key = "pair_annotate"

    @property
    @override
    def name(self) -> str:
        return f"llm:{self.provider.name}"

    @staticmethod
    def describe(record: AdmissionRecord, cohort: Cohort) -> str:
        lines = []
        for kind in CodeKind:
            texts = cohort.code_descriptions(record.admission_key, kind)
            lines.append(f"{kind.value}: {'; '.join(texts) or 'none'}")
        return "\n".join(lines)

    @override
    def annotate(
        self, target: AdmissionRecord, candidate: AdmissionRecord, cohort: Cohort
    ) -> tuple[float, float, float]:
        """Per-modality scores parsed from the model's reply.

        Raises:
            ProviderFailureError: If the reply does not carry all three scores.
        """
        reply = self.ask(
            target=self.describe(target, cohort), candidate=self.describe(candidate, cohort)
        )
        found: dict[str, float] = {}
        for label, value in _SCORE.findall(reply):
            found.setdefault(label[:4].lower(), min(1.0, max(0.0, float(value))))
        try:
            return found["diag"], found["medi"], found["proc"]
        except KeyError:
            raise ProviderFailureError(f"Unparseable similarity rating: {reply!r}") from None
