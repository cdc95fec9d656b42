"""Held-out evaluation, fill baselines, ablation runs and gradient attribution."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import stats as sps

from . import imputation, metrics
from .core import ops
from .core.tape import Tape
from .data import Batch
from .errors import ConfigError, MetricError
from .model import forward
from .synth import visit_years
from .training import ABLATIONS, TrainConfig, train, training_means

log = logging.getLogger(__name__)

FILL_STRATEGIES = ("forward", "linear", "mean")


@dataclass
class MetricsReport:
    n: int
    auc: float | None
    acc: float | None
    bacc: float | None
    mae_mri: float | None
    rmse_mri: float | None
    mae_pet: float | None
    rmse_pet: float | None

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _maybe(fn, *args):
    try:
        return fn(*args)
    except MetricError:
        return None


def conversion_scores(model, batch, bl_only=True, mri_only=False):
    """pMCI probability per subject.  ``model`` is a ``TrainResult`` (store, model_cfg, fill)."""
    inputs = batch.restrict(bl_only=bl_only, mri_only=mri_only)
    fwd = forward(inputs, model.store, model.model_cfg, fill=model.fill)
    return fwd.pred.c_prob[:, 1]


def imputation_estimates(model, batch):
    """Model estimates ``(x_hat_mri, x_hat_pet)`` of shape ``(N, T, D)`` from all available inputs.

    Each visit's estimate is formed before that visit's own row enters the
    recurrence, so comparing it with the observed row is a held-out error.
    BL MRI has no estimate and is NaN.
    """
    if not model.model_cfg.use_imputation:
        n, t, d = batch.x_mri.shape
        return (np.broadcast_to(model.fill["mri"], (n, t, d)).copy(),
                np.broadcast_to(model.fill["pet"], (n, t, d)).copy())
    trace = imputation.rollout(batch, model.store, model.model_cfg.layers)
    x_hat_mri = np.stack([np.full_like(trace.x_hat_pet[0], np.nan)] + trace.x_hat_mri[1:], axis=1)
    x_hat_pet = np.stack(trace.x_hat_pet, axis=1)
    return x_hat_mri, x_hat_pet


def imputation_errors(batch, x_hat_mri, x_hat_pet):
    """``(mae_mri, rmse_mri, mae_pet, rmse_pet)`` over observed rows (MRI from the second visit)."""
    m_mri = batch.m_mri.copy()
    m_mri[:, 0] = 0.0
    mri = _maybe(metrics.masked_errors, batch.x_mri, x_hat_mri, m_mri) or (None, None)
    pet = _maybe(metrics.masked_errors, batch.x_pet, x_hat_pet, batch.m_pet) or (None, None)
    return mri + pet


def evaluate_model(model, cohort, subset="test", bl_only=True, mri_only=False):
    """Conversion metrics and imputation errors from the restricted inputs.

    ``bl_only`` zeroes every mask after BL and ``mri_only`` drops BL PET.  The
    restricted masks serve both as model inputs and as the set of rows the
    imputation errors are scored on, so nothing outside them is ever read.
    """
    subjects = {"test": cohort.test_subjects, "val": cohort.val_subjects,
                "train": cohort.train_subjects}
    if subset not in subjects:
        raise ConfigError(f"subset must be one of {sorted(subjects)}")
    batch = Batch.from_subjects(subjects[subset]())
    if len(batch) == 0:
        raise MetricError(f"{subset} fold is empty")
    inputs = batch.restrict(bl_only=bl_only, mri_only=mri_only)
    scores = conversion_scores(model, inputs, bl_only=False)
    errs = imputation_errors(inputs, *imputation_estimates(model, inputs))
    return MetricsReport(
        n=len(batch),
        auc=_maybe(metrics.auc, scores, batch.c),
        acc=metrics.accuracy(scores, batch.c),
        bacc=_maybe(metrics.balanced_accuracy, scores, batch.c),
        mae_mri=errs[0], rmse_mri=errs[1], mae_pet=errs[2], rmse_pet=errs[3],
    )


# -- fill baselines -------------------------------------------------------

def class_means(cohort):
    """Per-class, per-modality feature means over observed training rows: ``{c: {mod: (D,)}}``."""
    batch = Batch.from_subjects(cohort.train_subjects())
    out = {}
    for cls in (0, 1):
        sel = batch.c == cls
        out[cls] = {}
        for mod in ("mri", "pet"):
            m = getattr(batch, f"m_{mod}")[sel] > 0
            if not m.any():
                raise MetricError(f"no observed {mod} rows for class {cls} in the training folds")
            out[cls][mod] = getattr(batch, f"x_{mod}")[sel][m].mean(axis=0)
    return out


def _estimate(x, m, t, times, strategy, mean):
    """Fill value for visit ``t`` of one subject/modality from its other observed visits."""
    prior = [s for s in range(t) if m[s] > 0]
    after = [s for s in range(t + 1, len(m)) if m[s] > 0]
    if strategy == "mean" or not (prior or after):
        return mean
    if strategy == "forward":
        return x[prior[-1]] if prior else mean
    if prior and after:
        a, b = prior[-1], after[0]
        w = (times[t] - times[a]) / (times[b] - times[a])
        return (1.0 - w) * x[a] + w * x[b]
    return x[prior[-1]] if prior else x[after[0]]


def _check_strategy(strategy):
    if strategy not in FILL_STRATEGIES:
        raise ConfigError(f"fill strategy must be one of {FILL_STRATEGIES}, got {strategy!r}")


def _mean_for(strategy, means, per_class, cls, mod):
    if strategy == "mean":
        if per_class is None:
            raise ConfigError("mean fill needs per-class means")
        return per_class[int(cls)][mod]
    return means[mod]


def baseline_estimates(batch, strategy, means, per_class=None):
    """Per-entry fill estimates ``(x_hat_mri, x_hat_pet)`` that never read the entry itself.

    ``forward`` carries the last earlier observation, ``linear`` interpolates in
    visit time between the nearest earlier and later observations (carrying
    the nearest one if only one side exists), ``mean`` uses the per-class
    training means.  With no other observed visit the training mean
    ``means[mod]`` is used.
    """
    _check_strategy(strategy)
    times = visit_years(batch.x_mri.shape[1])
    out = []
    for mod in ("mri", "pet"):
        x, m = getattr(batch, f"x_{mod}"), getattr(batch, f"m_{mod}")
        est = np.empty_like(x)
        for i in range(len(batch)):
            mean = _mean_for(strategy, means, per_class, batch.c[i], mod)
            for t in range(x.shape[1]):
                est[i, t] = _estimate(x[i], m[i], t, times, strategy, mean)
        out.append(est)
    return tuple(out)


def fill_baseline(cohort, strategy):
    """Copy of ``cohort`` whose missing rows are filled (masks unchanged)."""
    _check_strategy(strategy)
    train = Batch.from_subjects(cohort.train_subjects())
    means = training_means(train)
    per_class = class_means(cohort) if strategy == "mean" else None
    times = visit_years(cohort.t)
    subjects = []
    for s in cohort.subjects:
        fields_ = {}
        for mod in ("mri", "pet"):
            x, m = getattr(s, f"x_{mod}"), getattr(s, f"m_{mod}")
            mean = _mean_for(strategy, means, per_class, s.c, mod)
            filled = np.array(x, dtype=np.float64, copy=True)
            for t in np.flatnonzero(np.asarray(m) == 0):
                filled[t] = _estimate(x, m, t, times, strategy, mean)
            fields_[f"x_{mod}"] = filled
        subjects.append(replace(s, **fields_))
    return replace(cohort, subjects=subjects)


def fill_baseline_errors(cohort, strategy, subset="test"):
    """Held-out errors of a fill strategy on the observed rows of ``subset``."""
    means = training_means(Batch.from_subjects(cohort.train_subjects()))
    per_class = class_means(cohort) if strategy == "mean" else None
    batch = Batch.from_subjects(getattr(cohort, f"{subset}_subjects")())
    return imputation_errors(batch, *baseline_estimates(batch, strategy, means, per_class))


# -- ablations ------------------------------------------------------------

def run_ablation(cohort, model_cfg, train_cfg: TrainConfig, variants=("full",) + ABLATIONS,
                 mri_only=False):
    """Train and evaluate each variant (``full`` or one ablation tag); returns name -> report."""
    reports = {}
    for name in variants:
        cfg = replace(train_cfg, ablate=() if name == "full" else (name,))
        model = train(cohort, model_cfg, cfg)
        reports[name] = evaluate_model(model, cohort, "test", bl_only=True, mri_only=mri_only)
    return reports


def paired_ttest(a, b):
    """Two-sided paired t-test p-value for per-seed metrics of two variants."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape or a.size < 2:
        raise MetricError("paired t-test needs two equal-length samples of size >= 2")
    return float(sps.ttest_rel(a, b).pvalue)


# -- attribution ----------------------------------------------------------

def attribution_map(model, batch):
    """Mean |d y_t[changed] / d x_t| per visit and feature, per modality: two ``(T, D)`` arrays.

    Gradients are taken with all available inputs and averaged over subjects
    whose row is observed at that visit; visits with no observed rows give NaN.
    """
    n, t_len, d = batch.x_mri.shape
    tape = Tape(model.store)
    x_mri, x_pet = tape.watch(batch.x_mri), tape.watch(batch.x_pet)
    watched = replace(batch, x_mri=x_mri, x_pet=x_pet)
    out = {"mri": np.full((t_len, d), np.nan), "pet": np.full((t_len, d), np.nan)}
    fwd = forward(watched, tape, model.model_cfg, fill=model.fill)
    for t in range(t_len):
        target = ops.sum_(fwd.pred.y_prob[:, t, 1])
        g_mri, g_pet = tape.grad_of(target, x_mri, x_pet)
        for mod, g in (("mri", g_mri), ("pet", g_pet)):
            m = getattr(batch, f"m_{mod}")[:, t] > 0
            if m.any():
                out[mod][t] = np.abs(g[m, t]).mean(axis=0)
    return out["mri"], out["pet"]


def top_k(importance, k):
    """Indices of the ``k`` largest entries per row (NaN rows give empty lists)."""
    d = importance.shape[-1]
    if k > d:
        log.warning("k=%d exceeds feature count %d; clipping", k, d)
        k = d
    rows = []
    for row in importance:
        if np.all(np.isnan(row)):
            rows.append([])
        else:
            rows.append(sorted(np.argsort(-row, kind="stable")[:k].tolist()))
    return rows


def attribute_rois(model, cohort, k=2, subset="test"):
    """Top-``k`` attributed features per visit for each modality."""
    batch = Batch.from_subjects(getattr(cohort, f"{subset}_subjects")())
    imp_mri, imp_pet = attribution_map(model, batch)
    return {"mri": top_k(imp_mri, k), "pet": top_k(imp_pet, k),
            "importance_mri": imp_mri, "importance_pet": imp_pet}
