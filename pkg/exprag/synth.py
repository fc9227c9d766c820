"""Seeded synthetic EHR cohorts with a known similarity structure.

Every subject belongs to a latent cluster. Code sets are drawn mostly from the cluster's slice
of the code vocabulary, the rest uniformly from the whole vocabulary, so admissions of one
cluster overlap more than admissions of different clusters. Discharge notes follow the canonical
seven-section layout; clinical narrative is filler drawn independently of the codes, while the
discharge-plan sections list a subset of the admission's diagnoses and medications.
"""

import itertools
import logging
import random
from collections.abc import Sequence
from enum import StrEnum
from pathlib import Path
from typing import NamedTuple, Self

from pydantic import BaseModel, Field, model_validator

from exprag.cohort import (
    DEFAULT_MAX_ENTRIES,
    DEFAULT_MIN_ENTRIES,
    AdmissionRecord,
    CodeEntry,
    Cohort,
    CodeKind,
    CohortLayout,
    NoteRecord,
    build_cohort,
    write_cohort_files,
)
from exprag.segmenter import SectionKind

logger = logging.getLogger(__name__)


class NoteStyle(StrEnum):
    SENTINEL = "sentinel"
    NARRATIVE = "narrative"


def _default_vocab_sizes() -> dict[CodeKind, int]:
    return {CodeKind.DIAGNOSIS: 300, CodeKind.MEDICATION: 240, CodeKind.PROCEDURE: 180}


class SynthParams(BaseModel):
    seed: int = 42
    n_subjects: int = Field(default=500, ge=1)
    n_clusters: int = Field(default=2, ge=1)
    codes_per_kind_range: tuple[int, int] = (DEFAULT_MIN_ENTRIES, DEFAULT_MAX_ENTRIES)
    vocab_sizes: dict[CodeKind, int] = Field(default_factory=_default_vocab_sizes)
    cluster_overlap: float = Field(default=0.9, ge=0, le=1)
    note_style: NoteStyle = NoteStyle.NARRATIVE
    admissions_per_subject: tuple[int, int] = (1, 2)
    max_discharge_items: int = Field(default=5, ge=1)
    instruction_bullets: tuple[int, int] = (4, 6)
    violation_rate: float = Field(
        default=0.0, ge=0, le=1, description="Share of admissions planted to fail the filter."
    )
    notes: bool = Field(default=True, description="Set to False for code-only cohorts.")

    @model_validator(mode="after")
    def _consistent(self) -> Self:
        low, high = self.codes_per_kind_range
        if not DEFAULT_MIN_ENTRIES <= low <= high <= DEFAULT_MAX_ENTRIES:
            raise ValueError(
                f"codes_per_kind_range {self.codes_per_kind_range} must lie within the filter "
                f"bounds [{DEFAULT_MIN_ENTRIES}, {DEFAULT_MAX_ENTRIES}]."
            )
        for kind in CodeKind:
            pool = self.vocab_sizes.get(kind, 0) // self.n_clusters
            if pool < high:
                raise ValueError(
                    f"{kind} vocabulary of {self.vocab_sizes.get(kind, 0)} leaves cluster pools of "
                    f"{pool} codes, fewer than the {high} an admission may draw."
                )
            if self.vocab_sizes[kind] <= DEFAULT_MAX_ENTRIES:
                raise ValueError(f"{kind} vocabulary must exceed {DEFAULT_MAX_ENTRIES} codes.")
        for name in ("admissions_per_subject", "instruction_bullets"):
            first, last = getattr(self, name)
            if not 1 <= first <= last:
                raise ValueError(f"{name} must be an increasing range of positive counts.")
        return self


# Description words never occur in the narrative filler below.
_DIAGNOSIS_WORDS = (
    ["acute", "chronic", "recurrent", "severe", "mild", "congenital", "secondary", "primary",
     "idiopathic", "bilateral", "focal", "diffuse"],
    ["renal", "hepatic", "cardiac", "pulmonary", "gastric", "cerebral", "spinal", "thyroid",
     "pancreatic", "vascular", "cutaneous", "ocular", "biliary", "colonic", "pleural"],
    ["failure", "insufficiency", "infection", "hemorrhage", "stenosis", "obstruction", "neoplasm",
     "inflammation", "ulcer", "fibrosis", "edema", "embolism"],
)
_PROCEDURE_WORDS = (
    ["open", "closed", "percutaneous", "endoscopic", "laparoscopic", "robotic"],
    ["renal", "hepatic", "cardiac", "pulmonary", "gastric", "cerebral", "spinal", "thyroid",
     "pancreatic", "vascular", "cutaneous", "ocular", "biliary", "colonic", "pleural"],
    ["biopsy", "excision", "repair", "drainage", "resection", "bypass", "insertion",
     "replacement", "ablation"],
)
_DRUG_ONSETS = ["b", "d", "f", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "tr", "pr", "cl"]
_DRUG_VOWELS = ["a", "e", "i", "o", "u"]
_DRUG_STEMS = ["pril", "olol", "statin", "sartan", "azole", "cillin", "mycin", "dronate",
               "tidine", "prazole", "parin", "xaban"]

_SYMPTOMS = ["fatigue", "dizziness", "nausea", "cough", "headache", "palpitations", "chills",
             "weakness", "poor appetite", "malaise", "insomnia", "fever"]
_FINDINGS = ["alert and oriented", "in no apparent distress", "comfortable at rest",
             "well appearing", "mildly anxious", "afebrile"]
_COURSES = ["was monitored on telemetry", "tolerated a regular diet", "ambulated with assistance",
            "was seen by physical therapy", "remained hemodynamically stable",
            "had labs trended daily", "was weaned to room air"]
_SPECIALISTS = ["family doctor", "cardiologist", "nephrologist", "surgeon",
                "neurologist", "endocrinologist"]
_WARNINGS = ["fever above 101", "chest pressure", "worsening shortness of breath", "fainting",
             "bleeding that does not stop", "new swelling in your legs"]

# One header per canonical section; discharge summary holds the two gold lists.
NOTE_HEADERS: dict[SectionKind, tuple[str, ...]] = {
    SectionKind.PATIENT_DEMOGRAPHY: ("Patient Demography",),
    SectionKind.PRESENTING_CONDITION: ("Chief Complaint",),
    SectionKind.CLINICAL_ASSESSMENT: ("Physical Exam",),
    SectionKind.TREATMENT_PLAN: ("Major Surgical or Invasive Procedure",),
    SectionKind.IN_HOSPITAL_PROGRESS: ("Brief Hospital Course",),
    SectionKind.DISCHARGE_SUMMARY: ("Discharge Diagnosis", "Discharge Medications"),
    SectionKind.POST_DISCHARGE_INSTRUCTIONS: ("Discharge Instructions",),
}


class SynthVocabulary(NamedTuple):
    """Codes per kind in a fixed order, with their descriptions."""

    codes: dict[CodeKind, list[str]]
    descriptions: dict[CodeKind, dict[str, str]]

    def describe(self, kind: CodeKind, code: str) -> str:
        return self.descriptions[kind][code]


def _phrases(words: tuple[list[str], ...], count: int, rng: random.Random) -> list[str]:
    combos = [" ".join(parts) for parts in itertools.product(*words)]
    if len(combos) < count:
        raise ValueError(f"Only {len(combos)} distinct descriptions for {count} codes.")
    rng.shuffle(combos)
    return [phrase[:1].upper() + phrase[1:] for phrase in combos[:count]]


def _drug_names(count: int, rng: random.Random) -> list[str]:
    names: set[str] = set()
    ordered: list[str] = []
    while len(ordered) < count:
        syllables = "".join(
            rng.choice(_DRUG_ONSETS) + rng.choice(_DRUG_VOWELS) for _ in range(rng.randint(1, 2))
        )
        name = (syllables + rng.choice(_DRUG_STEMS)).capitalize()
        if name not in names:
            names.add(name)
            ordered.append(name)
    return ordered


def generate_vocabulary(params: SynthParams) -> SynthVocabulary:
    rng = random.Random(f"{params.seed}:vocabulary")
    texts = {
        CodeKind.DIAGNOSIS: _phrases(_DIAGNOSIS_WORDS, params.vocab_sizes[CodeKind.DIAGNOSIS], rng),
        CodeKind.MEDICATION: _drug_names(params.vocab_sizes[CodeKind.MEDICATION], rng),
        CodeKind.PROCEDURE: _phrases(_PROCEDURE_WORDS, params.vocab_sizes[CodeKind.PROCEDURE], rng),
    }
    prefix = {CodeKind.DIAGNOSIS: "D", CodeKind.MEDICATION: "N", CodeKind.PROCEDURE: "P"}
    codes = {
        kind: [f"{prefix[kind]}{i:05d}" for i in range(len(texts[kind]))] for kind in CodeKind
    }
    descriptions = {
        kind: dict(zip(codes[kind], texts[kind], strict=True)) for kind in CodeKind
    }
    return SynthVocabulary(codes, descriptions)


def _draw_codes(
    vocabulary: Sequence[str], pool: Sequence[str], size: int, overlap: float, rng: random.Random
) -> frozenset[str]:
    from_pool = min(round(size * overlap), len(pool))
    chosen = set(rng.sample(list(pool), from_pool))
    while len(chosen) < size:
        chosen.add(vocabulary[rng.randrange(len(vocabulary))])
    return frozenset(chosen)


def _cluster_pools(params: SynthParams, vocab: SynthVocabulary) -> list[dict[CodeKind, list[str]]]:
    """Disjoint, equally sized slices of each code vocabulary, one per cluster."""
    size = {kind: len(vocab.codes[kind]) // params.n_clusters for kind in CodeKind}
    return [
        {kind: vocab.codes[kind][c * size[kind] : (c + 1) * size[kind]] for kind in CodeKind}
        for c in range(params.n_clusters)
    ]


def _section_body(
    kind: SectionKind, admission_key: str, style: NoteStyle, rng: random.Random
) -> str:
    if style is NoteStyle.SENTINEL:
        count = rng.randint(2, 3)
        return "\n".join(f"Sentinel {admission_key} {kind.value} {i}." for i in range(1, count + 1))
    return " ".join(_narrative(kind, rng) for _ in range(rng.randint(2, 4)))


def _narrative(kind: SectionKind, rng: random.Random) -> str:
    match kind:
        case SectionKind.PATIENT_DEMOGRAPHY:
            sex = rng.choice(["male", "female"])
            home = rng.choice(["alone", "with family", "in assisted living"])
            return f"Age {rng.randint(21, 94)}, {sex}, lives {home}."
        case SectionKind.PRESENTING_CONDITION:
            return f"Presented with {rng.choice(_SYMPTOMS)} for {rng.randint(1, 14)} days."
        case SectionKind.CLINICAL_ASSESSMENT:
            return (
                f"Patient {rng.choice(_FINDINGS)}, blood pressure {rng.randint(95, 170)}/"
                f"{rng.randint(55, 100)}, heart rate {rng.randint(55, 120)}."
            )
        case SectionKind.TREATMENT_PLAN:
            return f"Plan discussed with the team on day {rng.randint(1, 5)}."
        case _:
            return f"The patient {rng.choice(_COURSES)}."


def _gold_subset(codes: frozenset[str], limit: int, rng: random.Random) -> list[str]:
    ordered = sorted(codes)
    size = min(limit, max(1, len(ordered) // 2))
    return sorted(rng.sample(ordered, size))


def _instructions(medications: Sequence[str], count: int, rng: random.Random) -> list[str]:
    templates = [
        lambda: (
            f"Take {rng.choice(medications or ['acetaminophen'])} "
            f"{rng.choice([5, 10, 20, 40])} mg every morning."
        ),
        lambda: f"Walk for {rng.choice([10, 15, 20, 30])} minutes twice a day.",
        lambda: (
            f"Avoid lifting more than {rng.choice([5, 10, 15])} pounds "
            f"for {rng.randint(2, 6)} weeks."
        ),
        lambda: f"Follow up with your {rng.choice(_SPECIALISTS)} in {rng.randint(1, 4)} weeks.",
        lambda: (
            f"Call your doctor if you develop {rng.choice(_WARNINGS)}. "
            "Bring this list to the visit."
        ),
        lambda: f"Limit salt intake to {rng.choice([1500, 2000])} mg per day.",
        lambda: f"Check your weight every {rng.choice(['morning', 'evening'])} and record it.",
    ]
    picks = rng.sample(range(len(templates)), min(count, len(templates)))
    return [templates[i]() for i in picks]


def gen_note(
    adm: AdmissionRecord,
    style: NoteStyle,
    vocab: SynthVocabulary,
    params: SynthParams | None = None,
) -> str:
    """Discharge note with all seven canonical sections.

    Discharge Diagnosis and Discharge Medications list a seeded subset of the admission's codes
    by description; Discharge Instructions hold between 4 and 6 bullets.
    """
    params = params or SynthParams(note_style=style)
    rng = random.Random(f"{params.seed}:note:{adm.admission_key}")
    diagnoses = _gold_subset(adm.diag_codes, params.max_discharge_items, rng)
    medications = _gold_subset(adm.med_codes, params.max_discharge_items, rng)
    drug_names = [vocab.describe(CodeKind.MEDICATION, code) for code in medications]

    sections: list[str] = []
    for kind in SectionKind:
        header, *extra = NOTE_HEADERS[kind]
        body = _section_body(kind, adm.admission_key, style, rng)
        if kind is SectionKind.DISCHARGE_SUMMARY:
            listed = "\n".join(
                f"{i}. {vocab.describe(CodeKind.DIAGNOSIS, code)}"
                for i, code in enumerate(diagnoses, start=1)
            )
            sections.append(f"{header}:\n{body}\n{listed}")
            prescribed = "\n".join(
                f"{i}. {name} {rng.choice([5, 10, 25, 50])} mg PO {rng.choice(['daily', 'BID'])}"
                for i, name in enumerate(drug_names, start=1)
            )
            sections.append(f"{extra[0]}:\n{prescribed}")
        elif kind is SectionKind.POST_DISCHARGE_INSTRUCTIONS:
            bullets = _instructions(drug_names, rng.randint(*params.instruction_bullets), rng)
            sections.append(f"{header}:\n{body}\n" + "\n".join(f"- {b}" for b in bullets))
        else:
            sections.append(f"{header}:\n{body}")
    return "\n\n".join(sections) + "\n"


class SyntheticCohort(NamedTuple):
    cohort: Cohort
    clusters: dict[str, int]
    violations: frozenset[str]
    vocabulary: SynthVocabulary


def _plant_violation(
    codes: dict[CodeKind, frozenset[str]], vocab: SynthVocabulary, rng: random.Random
) -> tuple[dict[CodeKind, frozenset[str]], bool]:
    """Break one filter condition; returns the codes and whether the note must be dropped."""
    choice = rng.choice(["no_note", "too_few", "too_many"])
    if choice == "no_note":
        return codes, True
    kind = rng.choice(list(CodeKind))
    if choice == "too_few":
        codes[kind] = frozenset(sorted(codes[kind])[: DEFAULT_MIN_ENTRIES - 1])
    else:
        codes[kind] = frozenset(rng.sample(vocab.codes[kind], DEFAULT_MAX_ENTRIES + 1))
    return codes, False


def synthesize_cohort(params: SynthParams) -> SyntheticCohort:
    """Generate a cohort in memory; identical parameters give identical cohorts."""
    rng = random.Random(params.seed)
    vocab = generate_vocabulary(params)
    pools = _cluster_pools(params, vocab)
    low, high = params.codes_per_kind_range

    entries: dict[CodeKind, list[CodeEntry]] = {kind: [] for kind in CodeKind}
    notes: list[NoteRecord] = []
    clusters: dict[str, int] = {}
    violations: set[str] = set()
    serial = itertools.count(1)
    for s in range(1, params.n_subjects + 1):
        subject = f"S{s:04d}"
        cluster = rng.randrange(params.n_clusters)
        for _ in range(rng.randint(*params.admissions_per_subject)):
            key = f"H{next(serial):04d}"
            codes = {
                kind: _draw_codes(
                    vocab.codes[kind],
                    pools[cluster][kind],
                    rng.randint(low, high),
                    params.cluster_overlap,
                    rng,
                )
                for kind in CodeKind
            }
            drop_note = False
            if params.violation_rate and rng.random() < params.violation_rate:
                codes, drop_note = _plant_violation(codes, vocab, rng)
                violations.add(key)
            clusters[key] = cluster
            for kind in CodeKind:
                entries[kind].extend(
                    CodeEntry(
                        subject_key=subject,
                        admission_key=key,
                        kind=kind,
                        code=code,
                        description=vocab.describe(kind, code),
                    )
                    for code in sorted(codes[kind])
                )
            if params.notes and not drop_note:
                record = AdmissionRecord(
                    subject_key=subject,
                    admission_key=key,
                    diag_codes=codes[CodeKind.DIAGNOSIS],
                    med_codes=codes[CodeKind.MEDICATION],
                    proc_codes=codes[CodeKind.PROCEDURE],
                )
                text = gen_note(record, params.note_style, vocab, params)
                notes.append(NoteRecord(key, subject, text))

    cohort = build_cohort(
        entries[CodeKind.DIAGNOSIS],
        entries[CodeKind.MEDICATION],
        entries[CodeKind.PROCEDURE],
        notes,
    )
    logger.info(
        "Synthesized %d admissions of %d subjects in %d clusters (%d planted violations).",
        cohort.size,
        params.n_subjects,
        params.n_clusters,
        len(violations),
    )
    return SyntheticCohort(cohort, clusters, frozenset(violations), vocab)


def gen_cohort(
    params: SynthParams, out_dir: Path, layout: CohortLayout | None = None
) -> SyntheticCohort:
    """Generate a cohort and write it in the ingestion file formats."""
    synthetic = synthesize_cohort(params)
    write_cohort_files(synthetic.cohort, Path(out_dir), layout)
    logger.info("Wrote synthetic cohort files to %s", out_dir)
    return synthetic
