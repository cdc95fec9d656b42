from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcnet.data import (Batch, Cohort, SubjectRecord, cohorts_equal, load_cohort, normalize,
                        split_stratified, train_folds, with_split, write_cohort)
from mcnet.errors import ParseError, SchemaError, SplitError
from mcnet.synth import SynthConfig, generate_cohort

FIXTURE = Path(__file__).parent / "fixtures" / "cohort_3subjects.csv"


def test_fixture_loads_three_subjects():
    cohort = load_cohort(FIXTURE)
    assert [s.subject_id for s in cohort.subjects] == ["A01", "B02", "C03"]
    a, b, c = cohort.subjects
    assert a.m_mri.tolist() == [1, 1, 0, 1, 1]
    assert a.m_pet.tolist() == [1, 0, 1, 1, 0]
    assert b.m_pet.tolist() == [0, 1, 1, 0, 1]
    assert b.y.tolist() == [0, 0, 1, 1, 1] and b.c == 1
    assert c.m_pet.tolist() == [0, 0, 0, 0, 0]
    assert a.x_pet[2].tolist() == [1.15, 0.35, -0.72]


def test_write_then_load_round_trip(tmp_path):
    cohort = generate_cohort(SynthConfig(n_subjects=30, d=4, seed=5))
    write_cohort(tmp_path / "c.csv", cohort)
    back = load_cohort(tmp_path / "c.csv")
    # masked rows are written as they are stored, so the round trip is exact everywhere
    assert cohorts_equal(cohort, back)


def test_masks_come_from_mask_column_not_values(tmp_path):
    text = FIXTURE.read_text().replace("A01,1,pet,0,0.0,0.0,0.0", "A01,1,pet,0,nan,nan,nan")
    (tmp_path / "c.csv").write_text(text)
    cohort = load_cohort(tmp_path / "c.csv")
    assert cohort.subjects[0].m_pet[1] == 0


@pytest.mark.parametrize("old,new,line,field", [
    ("A01,0,mri,1,0.52", "A01,0,mri,2,0.52", 2, "mask"),
    ("A01,0,pet,1,1.2,", "A01,0,pet,1,abc,", 3, "f0"),
    ("B02,1,mri,1,-0.5", "B02,1,xray,1,-0.5", 14, "modality"),
    ("A01,0,mri,1,0.52,-1.1,0.03,0,0", "A01,zero,mri,1,0.52,-1.1,0.03,0,0", 2, "visit_index"),
])
def test_malformed_rows_name_line_and_field(tmp_path, old, new, line, field):
    (tmp_path / "c.csv").write_text(FIXTURE.read_text().replace(old, new, 1))
    with pytest.raises(ParseError) as info:
        load_cohort(tmp_path / "c.csv")
    assert info.value.line == line
    assert info.value.field == field
    assert f"line {line}" in str(info.value)


def test_grid_violations_are_schema_errors(tmp_path):
    lines = FIXTURE.read_text().splitlines()
    (tmp_path / "missing.csv").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(SchemaError):
        load_cohort(tmp_path / "missing.csv")
    (tmp_path / "outside.csv").write_text(FIXTURE.read_text().replace("C03,4,pet", "C03,7,pet"))
    with pytest.raises(SchemaError):
        load_cohort(tmp_path / "outside.csv")


def _cohort_with_folds(n=200, d=3, seed=0):
    return with_split(generate_cohort(SynthConfig(n_subjects=n, d=d, seed=seed)), seed)


def test_normalized_training_entries_have_zero_mean_unit_std():
    cohort = normalize(_cohort_with_folds(), train_folds())
    for mod in ("mri", "pet"):
        rows = np.concatenate([getattr(s, f"x_{mod}")[getattr(s, f"m_{mod}") > 0]
                               for s in cohort.train_subjects()])
        assert np.max(np.abs(rows.mean(axis=0))) < 1e-10
        assert np.max(np.abs(rows.std(axis=0) - 1.0)) < 1e-10


def test_masked_entries_untouched_and_constant_feature_clamped():
    cohort = _cohort_with_folds()
    subjects = []
    for s in cohort.subjects:
        x_pet = s.x_pet.copy()
        x_pet[:, 1] = 4.0
        x_pet[s.m_pet == 0] = 999.0
        subjects.append(replace(s, x_pet=x_pet))
    out = normalize(replace(cohort, subjects=subjects), train_folds())
    for s in out.subjects:
        assert np.all(s.x_pet[s.m_pet == 0] == 999.0)
        assert np.all(s.x_pet[s.m_pet > 0, 1] == 0.0)
    assert any("f1" in w for w in out.norm_stats["warnings"])


def test_normalize_needs_training_folds():
    with pytest.raises(SplitError):
        normalize(_cohort_with_folds(), set())


def _balanced(n_per_class):
    subjects = []
    for i in range(2 * n_per_class):
        subjects.append(SubjectRecord(f"S{i:03d}", np.zeros((5, 2)), np.zeros((5, 2)),
                                      np.ones(5, int), np.ones(5, int), np.zeros(5, int), int(i % 2)))
    return Cohort(subjects)


def test_split_exact_divisibility_and_determinism():
    cohort = _balanced(50)
    a = split_stratified(cohort, 7)
    assert a == split_stratified(cohort, 7)
    for fold in range(10):
        members = [s for s in cohort.subjects if a[s.subject_id] == fold]
        assert sum(s.c for s in members) == 5
        assert len(members) == 10


def test_split_stratification_counting_oracle_173():
    cohort = generate_cohort(SynthConfig(n_subjects=173, d=2, seed=11))
    a = split_stratified(cohort, 3)
    assert set(a) == {s.subject_id for s in cohort.subjects}
    n_pos = sum(s.c for s in cohort.subjects)
    for fold in range(10):
        members = [s for s in cohort.subjects if a[s.subject_id] == fold]
        expected = n_pos * len(members) / len(cohort.subjects)
        assert abs(sum(s.c for s in members) - expected) <= 1


def test_split_needs_ten_per_class():
    with pytest.raises(SplitError):
        split_stratified(_balanced(9), 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(10, 40), st.integers(10, 40), st.integers(0, 10_000))
def test_folds_partition_the_cohort(n0, n1, seed):
    subjects = [SubjectRecord(f"S{i}", np.zeros((5, 1)), np.zeros((5, 1)), np.ones(5, int),
                              np.ones(5, int), np.zeros(5, int), int(i >= n0)) for i in range(n0 + n1)]
    a = split_stratified(Cohort(subjects), seed)
    assert sorted(a) == sorted(s.subject_id for s in subjects)
    sizes = np.bincount(list(a.values()), minlength=10)
    assert sizes.max() - sizes.min() <= 1
    for cls, n in ((0, n0), (1, n1)):
        per = np.bincount([a[s.subject_id] for s in subjects if s.c == cls], minlength=10)
        assert per.max() - per.min() <= 1


def test_batch_zeroes_masked_rows_and_restricts():
    cohort = load_cohort(FIXTURE)
    subjects = [replace(s, x_pet=np.where(s.m_pet[:, None] > 0, s.x_pet, np.nan)) for s in cohort.subjects]
    batch = Batch.from_subjects(subjects)
    assert np.all(np.isfinite(batch.x_pet))
    bl = batch.restrict(bl_only=True, mri_only=True)
    assert bl.m_mri[:, 1:].sum() == 0 and bl.m_pet.sum() == 0
    assert np.all(bl.x_mri[:, 1:] == 0.0)
