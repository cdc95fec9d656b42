from dataclasses import replace

import numpy as np
import pytest

import bench
from mcnet import forward
from mcnet.data import Batch, VAL_FOLD
from mcnet.errors import ConfigError, DivergenceError, SplitError
from mcnet.model import (DISC_PREFIX, GENERATOR_PREFIXES, PREDICTOR_PREFIXES, ModelConfig, combine,
                         names_under)
from mcnet.training import TrainConfig, Trainer, total_loss, train

SMALL = ModelConfig(d=4, hidden=8, layers=1, heads=2, temporal_heads=2)


def _small_cohort(seed=0):
    return bench.cohort(seed, n_subjects=200, d=4)


def _quick(seed=0, **kw):
    base = dict(epochs_a=2, epochs_b=2, epochs_c=2, lam=100.0)
    base.update(kw)
    return TrainConfig(seed=seed, **base)


def test_default_weights_and_config_parsing():
    cfg = TrainConfig()
    assert (cfg.lam, cfg.zeta, cfg.xi, cfg.lr, cfg.weight_decay) == (2.0, 10.0, 10.0, 5e-3, 5e-4)
    assert (cfg.epochs_a, cfg.epochs_b, cfg.epochs_c, cfg.patience, cfg.batch_size) == (100, 100, 50, 20, 32)
    parsed = TrainConfig(stages="A,B", ablate="al, lc")
    assert parsed.stages == ("A", "B") and parsed.ablate == ("LC", "AL")
    assert not parsed.adversarial_on and not parsed.use_cls
    for bad in ({"lam": -1}, {"lr": 0}, {"stages": "A,Z"}, {"ablate": "XX"}, {"batch_size": 0}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_total_loss_examples():
    total, breakdown = total_loss({"est": 0.1, "adv": -0.2, "cls": 0.3, "pred": 0.4}, TrainConfig())
    assert total == pytest.approx(5.2, abs=1e-12)
    assert breakdown == {"est": 0.1, "adv": -0.2, "cls": 0.3, "pred": 0.4, "total": pytest.approx(5.2)}
    zero, _ = total_loss({"est": 0.0, "adv": 0.0, "cls": 0.0, "pred": 0.0}, TrainConfig())
    assert zero == 0.0
    without_cls, _ = total_loss({"est": 0.1, "adv": -0.2, "cls": 0.3, "pred": 0.4}, TrainConfig(ablate="LC"))
    assert without_cls == pytest.approx(2.2, abs=1e-12)


def test_negative_weight_is_config_error():
    terms = {"est": 0.1, "adv": 0.0, "cls": 0.0, "pred": 0.0}
    with pytest.raises(ConfigError):
        combine(terms, 2.0, -1.0, 10.0)
    with pytest.raises(ConfigError):
        TrainConfig(zeta=-1.0)


def test_empty_training_fold_is_split_error():
    cohort = _small_cohort()
    only_val = replace(cohort, split_assignment={k: VAL_FOLD for k in cohort.split_assignment})
    with pytest.raises(SplitError):
        Trainer(only_val, SMALL, _quick())


def test_divergence_aborts_with_diagnostic():
    cohort = _small_cohort()
    subjects = [replace(s, x_mri=s.x_mri * 1e306) for s in cohort.subjects]
    with pytest.raises(DivergenceError) as info:
        with np.errstate(all="ignore"):
            train(replace(cohort, subjects=subjects), SMALL, _quick(stages="A"))
    assert "stage A" in str(info.value)


def _changed(a, b, names):
    return [n for n in names if not np.array_equal(a[n], b[n])]


def test_stage_namespaces_and_freeze_contract():
    cohort = _small_cohort(1)
    trainer = Trainer(cohort, SMALL, _quick(1, patience=100))
    store = trainer.store
    gen = names_under(store, GENERATOR_PREFIXES)
    pred = names_under(store, PREDICTOR_PREFIXES)
    disc = store.names(DISC_PREFIX)
    s0 = store.copy()
    trainer.stage_a()
    s1 = store.copy()
    assert _changed(s0, s1, gen) and _changed(s0, s1, disc)
    assert not _changed(s0, s1, pred)
    trainer.stage_b()
    s2 = store.copy()
    assert not _changed(s1, s2, gen + disc)
    assert _changed(s1, s2, pred)
    trainer.stage_c()
    assert _changed(s2, store, gen + pred)


def test_training_is_deterministic():
    cohort = _small_cohort(2)
    a = train(cohort, SMALL, _quick(2))
    b = train(cohort, SMALL, _quick(2))
    assert [r.get("val_auc") for r in a.log] == [r.get("val_auc") for r in b.log]
    assert a.log == b.log
    assert a.store.equal(b.store)


def test_loss_breakdown_signs():
    result = train(_small_cohort(3), SMALL, _quick(3))
    for record in result.log:
        loss = record["loss"]
        assert all(loss[k] >= 0 for k in ("est", "cls", "pred") if k in loss)
        if "adv" in loss:
            assert loss["adv"] <= 0
    assert {r["stage"] for r in result.log} == {"A", "B", "C"}


def test_retrain_warm_and_cold():
    cohort = _small_cohort(4)
    warm = train(cohort, SMALL, _quick(4, epochs_retrain=1))
    cold = train(cohort, SMALL, _quick(4, epochs_retrain=1, cold_restart=True))
    assert warm.log[-1]["stage"] == "retrain" and cold.log[-1]["stage"] == "retrain"
    assert not warm.store.equal(cold.store)


def test_bl_input_predictions_ignore_later_values():
    cohort = _small_cohort(5)
    result = train(cohort, SMALL, _quick(5, stages="A,B,C"))
    batch = Batch.from_subjects(cohort.subjects)
    inputs = batch.restrict(bl_only=True)
    poisoned = Batch(batch.ids, batch.x_mri.copy(), batch.x_pet.copy(), batch.m_mri, batch.m_pet, batch.y, batch.c)
    poisoned.x_mri[:, 1:] = np.nan
    poisoned.x_pet[:, 1:] = np.nan
    poisoned.x_pet[:, 0] = np.where(inputs.m_pet[:, :1] > 0, poisoned.x_pet[:, 0], np.nan)
    a = forward(batch, result.store, result.model_cfg, inputs.m_mri, inputs.m_pet, fill=result.fill)
    b = forward(poisoned, result.store, result.model_cfg, inputs.m_mri, inputs.m_pet, fill=result.fill)
    assert np.array_equal(a.pred.c_prob, b.pred.c_prob)
    assert np.array_equal(a.pred.y_prob, b.pred.y_prob)


def test_stage_a_reduces_validation_estimation_error():
    reductions = []
    for seed in range(3):
        cohort = bench.cohort(seed)
        trainer = Trainer(cohort, bench.model_config(cohort.d), bench.train_config(seed, stages="A"))
        before = trainer.validation_estimation()
        trainer.run()
        reductions.append(1.0 - trainer.validation_estimation() / before)
    assert np.mean(reductions) >= 0.30
