import itertools

import pytest
from pydantic import ValidationError

from exprag.cohort import CodeKind, filter_admissions
from exprag.ranker import (
    RankParams,
    SimilarityWeights,
    build_code_index,
    rank_top_k,
    similarity,
)
from exprag.segmenter import SectionKind, TaskKind, extract_gold, segment_note
from exprag.synth import SynthParams, gen_cohort, synthesize_cohort


def test_same_seed_gives_identical_files(tmp_path):
    params = SynthParams(seed=8, n_subjects=20)
    gen_cohort(params, tmp_path / "a")
    gen_cohort(params, tmp_path / "b")
    names = sorted(path.name for path in (tmp_path / "a").iterdir())
    assert names
    assert names == sorted(path.name for path in (tmp_path / "b").iterdir())
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_different_seeds_differ():
    first = synthesize_cohort(SynthParams(seed=1, n_subjects=10)).cohort
    second = synthesize_cohort(SynthParams(seed=2, n_subjects=10)).cohort
    assert first != second


def test_clusters_share_more_codes_within(narrative_cohort):
    cohort = narrative_cohort.cohort
    clusters = narrative_cohort.clusters
    within, across = [], []
    for a, b in itertools.combinations(cohort.keys[:60], 2):
        tau = similarity(cohort.get(a), cohort.get(b), SimilarityWeights.uniform()).tau
        (within if clusters[a] == clusters[b] else across).append(tau)
    assert within and across
    assert sum(within) / len(within) > sum(across) / len(across)


def test_every_admission_passes_the_filter(narrative_cohort):
    cohort = narrative_cohort.cohort
    assert not narrative_cohort.violations
    assert filter_admissions(cohort).keys == cohort.keys


def test_notes_list_gold_from_the_admission_codes(narrative_cohort):
    cohort = narrative_cohort.cohort
    for key in cohort.keys:
        record = cohort.get(key)
        seg = segment_note(record.note)
        assert set(seg.sections) == set(SectionKind)
        diagnoses = {item.display for item in extract_gold(seg, TaskKind.DIAGNOSIS)}
        assert diagnoses <= set(cohort.code_descriptions(key, CodeKind.DIAGNOSIS))
        assert 1 <= len(diagnoses) <= 5


def test_code_only_cohort():
    synthetic = synthesize_cohort(SynthParams(seed=4, n_subjects=10, notes=False))
    assert all(not record.has_note for record in synthetic.cohort.admissions.values())
    assert synthetic.cohort.descriptions[CodeKind.MEDICATION]


def test_params_validation():
    with pytest.raises(ValidationError):
        SynthParams(codes_per_kind_range=(2, 10))
    with pytest.raises(ValidationError):
        SynthParams(n_clusters=10)
    with pytest.raises(ValidationError):
        SynthParams(instruction_bullets=(5, 4))


def test_nearest_neighbor_shares_the_cluster():
    synthetic = synthesize_cohort(SynthParams(seed=11, n_subjects=300, notes=False))
    cohort, clusters = synthetic.cohort, synthetic.clusters
    index = build_code_index(cohort)
    params = RankParams(k=1, weights=SimilarityWeights.uniform())
    same = total = 0
    for key in cohort.keys:
        ranked = rank_top_k(index, cohort, key, params)
        if ranked:
            total += 1
            same += clusters[ranked[0].admission_key] == clusters[key]
    assert total >= 0.9 * cohort.size
    assert same / total >= 0.95
