"""Cohort records, the delimited cohort table, normalisation and stratified folds.

Cohort table: UTF-8 CSV with header
``subject_id,visit_index,modality,mask,f0,...,f{D-1},y,c``, one row per
(subject, visit, modality).  Every subject has exactly ``T`` visits for each
of ``mri`` and ``pet``.  ``mask`` is ``0``/``1``; feature values on mask-0
rows are ignored.  ``y`` is the per-visit change label and ``c`` the
conversion label, repeated on every row of the subject.  Extra trailing
columns (e.g. ``provenance``) are ignored on load.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ParseError, SchemaError, SplitError

log = logging.getLogger(__name__)

MODALITIES = ("mri", "pet")
VISITS = ("BL", "M06", "M12", "M24", "M36")
N_FOLDS = 10
TEST_FOLD, VAL_FOLD = 0, 1


@dataclass
class SubjectRecord:
    subject_id: str
    x_mri: np.ndarray  # (T, D)
    x_pet: np.ndarray  # (T, D)
    m_mri: np.ndarray  # (T,) 0/1
    m_pet: np.ndarray  # (T,) 0/1
    y: np.ndarray      # (T,) change-from-BL labels
    c: int             # 1 = pMCI

    @property
    def t(self):
        return self.x_mri.shape[0]

    @property
    def d(self):
        return self.x_mri.shape[1]


@dataclass
class Cohort:
    subjects: list
    norm_stats: dict = field(default_factory=dict)
    split_assignment: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def d(self):
        return self.subjects[0].d

    @property
    def t(self):
        return self.subjects[0].t

    def by_fold(self, folds):
        folds = set(folds)
        return [s for s in self.subjects if self.split_assignment[s.subject_id] in folds]

    def train_subjects(self):
        return self.by_fold(train_folds())

    def val_subjects(self):
        return self.by_fold({VAL_FOLD})

    def test_subjects(self):
        return self.by_fold({TEST_FOLD})


def train_folds():
    return set(range(N_FOLDS)) - {TEST_FOLD, VAL_FOLD}


@dataclass
class Batch:
    """Stacked arrays for a list of subjects; mask-0 feature rows are zeroed here, once."""

    ids: list
    x_mri: np.ndarray  # (N, T, D)
    x_pet: np.ndarray
    m_mri: np.ndarray  # (N, T) float 0/1
    m_pet: np.ndarray
    y: np.ndarray      # (N, T)
    c: np.ndarray      # (N,)

    @classmethod
    def from_subjects(cls, subjects):
        m_mri = np.array([s.m_mri for s in subjects], dtype=np.float64)
        m_pet = np.array([s.m_pet for s in subjects], dtype=np.float64)
        x_mri = np.where(m_mri[..., None] > 0, np.array([s.x_mri for s in subjects], dtype=np.float64), 0.0)
        x_pet = np.where(m_pet[..., None] > 0, np.array([s.x_pet for s in subjects], dtype=np.float64), 0.0)
        return cls(
            ids=[s.subject_id for s in subjects],
            x_mri=x_mri,
            x_pet=x_pet,
            m_mri=m_mri,
            m_pet=m_pet,
            y=np.array([s.y for s in subjects], dtype=np.float64),
            c=np.array([s.c for s in subjects], dtype=np.float64),
        )

    def __len__(self):
        return len(self.ids)

    def take(self, index):
        index = np.asarray(index)
        return Batch([self.ids[i] for i in index], self.x_mri[index], self.x_pet[index],
                     self.m_mri[index], self.m_pet[index], self.y[index], self.c[index])

    def restrict(self, bl_only=False, mri_only=False):
        """Copy with masks reduced to BL visits and/or with BL PET dropped; data rows re-zeroed."""
        m_mri, m_pet = self.m_mri.copy(), self.m_pet.copy()
        if bl_only:
            m_mri[:, 1:] = 0.0
            m_pet[:, 1:] = 0.0
        if mri_only:
            m_pet[:, 0] = 0.0
        return replace(self, m_mri=m_mri, m_pet=m_pet,
                       x_mri=np.where(m_mri[..., None] > 0, self.x_mri, 0.0),
                       x_pet=np.where(m_pet[..., None] > 0, self.x_pet, 0.0))


# ---------------------------------------------------------------- file format

def _fmt(v):
    return repr(float(v))


def write_cohort(path, cohort, provenance=None):
    """Write the cohort table.  ``provenance`` maps ``(subject_id, t, modality)`` to a tag."""
    d = cohort.d
    header = ["subject_id", "visit_index", "modality", "mask"] + [f"f{j}" for j in range(d)] + ["y", "c"]
    if provenance is not None:
        header.append("provenance")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for s in cohort.subjects:
            for t in range(s.t):
                for mod in MODALITIES:
                    x = getattr(s, f"x_{mod}")[t]
                    m = int(getattr(s, f"m_{mod}")[t])
                    row = [s.subject_id, t, mod, m] + [_fmt(v) for v in x] + [int(s.y[t]), int(s.c)]
                    if provenance is not None:
                        row.append(provenance[(s.subject_id, t, mod)])
                    w.writerow(row)


def load_cohort(path, t=len(VISITS)):
    path = Path(path)
    rows = {}
    order = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty cohort file", line=1) from None
        fixed = ["subject_id", "visit_index", "modality", "mask"]
        if header[:4] != fixed:
            raise ParseError(f"header must start with {fixed}", line=1)
        feats = []
        for name in header[4:]:
            if name.startswith("f") and name[1:].isdigit():
                feats.append(name)
            else:
                break
        if feats != [f"f{j}" for j in range(len(feats))] or not feats:
            raise ParseError("feature columns must be f0..f{D-1}", line=1)
        d = len(feats)
        tail = header[4 + d:4 + d + 2]
        if tail != ["y", "c"]:
            raise ParseError("expected y,c after the feature columns", line=1)
        ncols = 6 + d

        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < ncols:
                raise ParseError(f"expected {ncols} columns, got {len(row)}", line=lineno)
            sid = row[0]

            def parse_int(col, allowed=None):
                try:
                    v = int(row[col])
                except ValueError:
                    raise ParseError(f"not an integer: {row[col]!r}", line=lineno, field=header[col]) from None
                if allowed is not None and v not in allowed:
                    raise ParseError(f"value {v} not in {sorted(allowed)}", line=lineno, field=header[col])
                return v

            visit = parse_int(1)
            mod = row[2]
            if mod not in MODALITIES:
                raise ParseError(f"unknown modality {mod!r}", line=lineno, field="modality")
            if row[3] not in ("0", "1"):
                raise ParseError(f"mask must be 0 or 1, got {row[3]!r}", line=lineno, field="mask")
            mask = int(row[3])
            x = np.empty(d)
            for j in range(d):
                try:
                    x[j] = float(row[4 + j])
                except ValueError:
                    raise ParseError(f"not a number: {row[4 + j]!r}", line=lineno, field=f"f{j}") from None
            y = parse_int(4 + d, {0, 1})
            c = parse_int(5 + d, {0, 1})
            if not 0 <= visit < t:
                raise SchemaError(f"line {lineno}: visit_index {visit} outside grid 0..{t - 1}")
            if sid not in rows:
                rows[sid] = {}
                order.append(sid)
            key = (visit, mod)
            if key in rows[sid]:
                raise SchemaError(f"line {lineno}: duplicate row for subject {sid!r} visit {visit} {mod}")
            rows[sid][key] = (mask, x, y, c)

    subjects = []
    for sid in order:
        r = rows[sid]
        missing = [(v, m) for v in range(t) for m in MODALITIES if (v, m) not in r]
        if missing:
            raise SchemaError(f"subject {sid!r} lacks grid rows {missing}")
        cs = {r[k][3] for k in r}
        if len(cs) != 1:
            raise SchemaError(f"subject {sid!r} has inconsistent conversion labels")
        ys = []
        for v in range(t):
            yv = {r[(v, m)][2] for m in MODALITIES}
            if len(yv) != 1:
                raise SchemaError(f"subject {sid!r} visit {v} has inconsistent y")
            ys.append(yv.pop())
        subjects.append(SubjectRecord(
            subject_id=sid,
            x_mri=np.array([r[(v, "mri")][1] for v in range(t)]),
            x_pet=np.array([r[(v, "pet")][1] for v in range(t)]),
            m_mri=np.array([r[(v, "mri")][0] for v in range(t)], dtype=np.int64),
            m_pet=np.array([r[(v, "pet")][0] for v in range(t)], dtype=np.int64),
            y=np.array(ys, dtype=np.int64),
            c=cs.pop(),
        ))
    if not subjects:
        raise SchemaError(f"{path}: no subjects")
    return Cohort(subjects)


def cohorts_equal(a, b):
    """Field-by-field equality, NaN-aware on feature values."""
    if len(a.subjects) != len(b.subjects):
        return False
    for s, u in zip(a.subjects, b.subjects):
        if s.subject_id != u.subject_id or s.c != u.c:
            return False
        for name in ("m_mri", "m_pet", "y"):
            if not np.array_equal(getattr(s, name), getattr(u, name)):
                return False
        for name in ("x_mri", "x_pet"):
            if not np.array_equal(getattr(s, name), getattr(u, name), equal_nan=True):
                return False
    return True


# ---------------------------------------------------------------- normalisation

def normalize(cohort, training_folds):
    """Z-score present entries per modality and feature with training-fold statistics.

    Zero-variance features get a standard deviation of 1 and a warning in
    ``norm_stats["warnings"]``.  Mask-0 rows are copied unchanged.
    """
    training_folds = set(training_folds)
    if not training_folds:
        raise SplitError("normalize needs at least one training fold")
    train = cohort.by_fold(training_folds)
    if not train:
        raise SplitError("training folds contain no subjects")
    stats = {"warnings": []}
    for mod in MODALITIES:
        rows = np.concatenate([getattr(s, f"x_{mod}")[getattr(s, f"m_{mod}") > 0] for s in train])
        if rows.shape[0] == 0:
            raise SplitError(f"no present {mod} rows in the training folds")
        mu = rows.mean(axis=0)
        sd = rows.std(axis=0)
        for j in np.flatnonzero(sd == 0):
            msg = f"{mod} feature f{j} has zero variance on training data; scale clamped to 1"
            log.warning(msg)
            stats["warnings"].append(msg)
        sd = np.where(sd == 0, 1.0, sd)
        stats[mod] = {"mean": mu, "std": sd}
    return apply_normalization(cohort, stats)


def apply_normalization(cohort, stats):
    subjects = []
    for s in cohort.subjects:
        fields = {}
        for mod in MODALITIES:
            x = getattr(s, f"x_{mod}")
            m = getattr(s, f"m_{mod}") > 0
            z = x.copy()
            z[m] = (x[m] - stats[mod]["mean"]) / stats[mod]["std"]
            fields[f"x_{mod}"] = z
        subjects.append(replace(s, **fields))
    return replace(cohort, subjects=subjects, norm_stats=stats)


def denormalize_rows(x, stats, mod):
    return x * stats[mod]["std"] + stats[mod]["mean"]


def stats_to_json(stats):
    return {k: ({"mean": v["mean"].tolist(), "std": v["std"].tolist()} if k in MODALITIES else v)
            for k, v in stats.items()}


def stats_from_json(obj):
    return {k: ({"mean": np.array(v["mean"]), "std": np.array(v["std"])} if k in MODALITIES else v)
            for k, v in obj.items()}


# ---------------------------------------------------------------- splitting

def split_stratified(cohort, seed, n_folds=N_FOLDS):
    """Class-stratified assignment ``subject_id -> fold``.

    Subjects of each class are shuffled and dealt round-robin; the second
    class continues the deal where the first stopped so fold sizes differ by
    at most one.
    """
    by_class = {}
    for s in cohort.subjects:
        by_class.setdefault(int(s.c), []).append(s.subject_id)
    for cls, ids in by_class.items():
        if len(ids) < n_folds:
            raise SplitError(f"class {cls} has {len(ids)} subjects; need at least {n_folds}")
    if len(by_class) < 2:
        raise SplitError("stratified split needs both classes")
    rng = np.random.default_rng(seed)
    assignment = {}
    offset = 0
    for cls in sorted(by_class):
        ids = sorted(by_class[cls])
        perm = rng.permutation(len(ids))
        for k, i in enumerate(perm):
            assignment[ids[i]] = (offset + k) % n_folds
        offset = (offset + len(ids)) % n_folds
    return assignment


def with_split(cohort, seed):
    return replace(cohort, split_assignment=split_stratified(cohort, seed))
