"""Loss assembly and the staged optimisation protocol.

Stage A trains the recurrences and imputation heads (masked estimation loss
plus the adversarial game) on every available visit.  Stage B freezes them
and trains the attention blocks and both heads.  Stage C unfreezes
everything and optimises the weighted total with inputs restricted to BL,
while the losses still supervise later observed visits.  After each stage
the parameters with the best validation score are restored.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import adversarial, fusion, imputation, metrics
from .core import Adam, ops
from .core.tape import Tape
from .data import Batch
from .errors import ConfigError, DivergenceError, SplitError
from .model import (DISC_PREFIX, GENERATOR_PREFIXES, PREDICTOR_PREFIXES, ModelConfig, combine,
                    forward, init_params, loss_terms, names_under, predict)

log = logging.getLogger(__name__)

ABLATIONS = ("LC", "CB", "DI", "AL")
STAGES = ("A", "B", "C", "retrain")


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 2.0
    zeta: float = 10.0
    xi: float = 10.0
    lr: float = 5e-3
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs_a: int = 100
    epochs_b: int = 100
    epochs_c: int = 50
    epochs_retrain: int = 0
    patience: int = 20
    seed: int = 0
    stages: tuple = ("A", "B", "C")
    cold_restart: bool = False
    ablate: tuple = ()

    def __post_init__(self):
        if min(self.lam, self.zeta, self.xi) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        stages = tuple(self.stages.split(",")) if isinstance(self.stages, str) else tuple(self.stages)
        ablate = tuple(self.ablate.split(",")) if isinstance(self.ablate, str) else tuple(self.ablate)
        ablate = tuple(a for a in (x.strip().upper() for x in ablate) if a)
        bad = [s for s in stages if s not in STAGES]
        if bad:
            raise ConfigError(f"unknown stages {bad}; choose from {STAGES}")
        bad = [a for a in ablate if a not in ABLATIONS]
        if bad:
            raise ConfigError(f"unknown ablations {bad}; choose from {ABLATIONS}")
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "ablate", tuple(sorted(set(ablate), key=ABLATIONS.index)))

    @classmethod
    def from_mapping(cls, mapping):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in mapping.items() if k in known})

    def to_dict(self):
        return asdict(self)

    @property
    def adversarial_on(self):
        return "AL" not in self.ablate and "DI" not in self.ablate

    @property
    def use_cls(self):
        return "LC" not in self.ablate


def apply_ablation(model_cfg: ModelConfig, cfg: TrainConfig) -> ModelConfig:
    return replace(model_cfg,
                   use_attention=model_cfg.use_attention and "CB" not in cfg.ablate,
                   use_imputation=model_cfg.use_imputation and "DI" not in cfg.ablate)


def total_loss(terms, cfg: TrainConfig):
    """Weighted sum of the component losses plus a float breakdown for logging."""
    total = combine(terms, cfg.lam, cfg.zeta, cfg.xi, cfg.use_cls)
    breakdown = {k: float(ops.value_of(v)) for k, v in terms.items()}
    breakdown["total"] = float(ops.value_of(total))
    return total, breakdown


def training_means(batch):
    """Per-feature means of the present training rows, used by the mean-fill ablation."""
    out = {}
    for mod in ("mri", "pet"):
        x = getattr(batch, f"x_{mod}")
        m = getattr(batch, f"m_{mod}") > 0
        out[mod] = x[m].mean(axis=0)
    return out


@dataclass
class TrainResult:
    store: object
    model_cfg: ModelConfig
    cfg: TrainConfig
    fill: dict
    log: list


def _check_finite(value, stage, epoch):
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} in stage {stage}, epoch {epoch}")


class Trainer:
    def __init__(self, cohort, model_cfg: ModelConfig, cfg: TrainConfig):
        train = cohort.train_subjects()
        val = cohort.val_subjects()
        if not train:
            raise SplitError("training fold is empty")
        if not val:
            raise SplitError("validation fold is empty")
        self.cfg = cfg
        self.mcfg = apply_ablation(model_cfg, cfg)
        self.train = Batch.from_subjects(train)
        self.val = Batch.from_subjects(val)
        self.val_bl = self.val.restrict(bl_only=True)
        self.fill = training_means(self.train)
        self.store = init_params(self.mcfg, cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        self.log = []

    # -- helpers ----------------------------------------------------------

    def _batches(self):
        order = self.rng.permutation(len(self.train))
        bs = self.cfg.batch_size
        for start in range(0, len(order), bs):
            yield order[start:start + bs]

    def _fill(self):
        return None if self.mcfg.use_imputation else self.fill

    def validation_auc(self, store=None):
        store = self.store if store is None else store
        fwd = forward(self.val_bl, store, self.mcfg, fill=self.fill)
        return metrics.auc(fwd.pred.c_prob[:, 1], self.val.c)

    def validation_estimation(self):
        trace = imputation.rollout(self.val, self.store, self.mcfg.layers)
        return float(imputation.estimation_loss(trace, self.val))

    def _loop(self, stage, epochs, step, score):
        """Run ``step(idx) -> breakdown`` over epochs, keep the best-scoring parameters."""
        best, best_store, stale = None, self.store.copy(), 0
        for epoch in range(epochs):
            sums = {}
            n = 0
            for idx in self._batches():
                breakdown = step(idx)
                _check_finite(breakdown["total"], stage, epoch)
                for k, v in breakdown.items():
                    sums[k] = sums.get(k, 0.0) + v * len(idx)
                n += len(idx)
            record = {"stage": stage, "epoch": epoch, "loss": {k: v / n for k, v in sums.items()}}
            record.update(score())
            self.log.append(record)
            key = record["select"]
            if best is None or key > best:
                best, best_store, stale = key, self.store.copy(), 0
            else:
                stale += 1
                if stale >= self.cfg.patience:
                    break
        self.store.load_values(best_store)

    def _names(self, prefixes):
        return names_under(self.store, prefixes)

    def _disc_names_exist(self):
        return bool(self.store.names(DISC_PREFIX))

    # -- stages -----------------------------------------------------------

    def stage_a(self):
        if not self.mcfg.use_imputation:
            return
        cfg = self.cfg
        opt = Adam(cfg.lr, cfg.weight_decay)
        gen_names = self._names(GENERATOR_PREFIXES)

        def step(idx):
            batch = self.train.take(idx)
            tape = Tape(self.store)
            trace = imputation.rollout(batch, tape, self.mcfg.layers)
            est = imputation.estimation_loss(trace, batch)
            out = {"est": float(ops.value_of(est))}
            if cfg.adversarial_on:
                u, masks = adversarial.stack_inputs(trace)
                l_d, l_adv, total = adversarial.alternate_update(
                    tape, self.store, opt, u, masks,
                    lambda l_adv: ops.add(ops.mul(est, cfg.lam), ops.mul(l_adv, cfg.zeta)),
                    gen_names, shared=self.mcfg.shared_discriminator)
                out.update(adv=l_adv, disc=l_d, total=total)
            else:
                total = ops.mul(est, cfg.lam)
                self.store.zero_grad(gen_names)
                tape.backward(total)
                opt.step(self.store, gen_names)
                out["total"] = float(ops.value_of(total))
            return out

        def score():
            v = self.validation_estimation()
            return {"val_est": v, "select": -v}

        self._loop("A", cfg.epochs_a, step, score)

    def stage_b(self):
        cfg = self.cfg
        opt = Adam(cfg.lr, cfg.weight_decay)
        names = self._names(PREDICTOR_PREFIXES)
        trace = imputation.rollout(self.train, self.store, self.mcfg.layers, fill=self._fill())
        h_mri = np.stack(trace.h_mri, axis=1)
        h_pet = np.stack(trace.h_pet, axis=1)

        def step(idx):
            batch = self.train.take(idx)
            tape = Tape(self.store)
            pred = predict(h_mri[idx], h_pet[idx], tape, self.mcfg)
            terms = {"est": 0.0, "adv": 0.0,
                     "cls": _cls(pred, batch), "pred": _pred(pred, batch)}
            total, breakdown = total_loss(terms, cfg)
            self.store.zero_grad(names)
            tape.backward(total)
            opt.step(self.store, names)
            return breakdown

        self._loop("B", cfg.epochs_b, step, self._auc_score)

    def stage_c(self, label="C", epochs=None):
        cfg = self.cfg
        opt = Adam(cfg.lr, cfg.weight_decay)
        gen_names = self._names(GENERATOR_PREFIXES + PREDICTOR_PREFIXES)

        def step(idx):
            batch = self.train.take(idx)
            inputs = batch.restrict(bl_only=True)
            tape = Tape(self.store)
            fwd = forward(batch, tape, self.mcfg, inputs.m_mri, inputs.m_pet, fill=self.fill)
            terms = loss_terms(fwd, batch, tape, self.mcfg, adversarial_on=False)
            if cfg.adversarial_on:
                u, masks = adversarial.stack_inputs(fwd.trace)

                def generator_loss(l_adv):
                    terms["adv"] = l_adv
                    return total_loss(terms, cfg)[0]

                l_d, _, _ = adversarial.alternate_update(
                    tape, self.store, opt, u, masks, generator_loss, gen_names,
                    shared=self.mcfg.shared_discriminator)
                _, breakdown = total_loss(terms, cfg)
                breakdown["disc"] = l_d
            else:
                total, breakdown = total_loss(terms, cfg)
                self.store.zero_grad(gen_names)
                if isinstance(total, ops.Node):
                    tape.backward(total)
                opt.step(self.store, gen_names)
            return breakdown

        self._loop(label, cfg.epochs_c if epochs is None else epochs, step, self._auc_score)

    def _auc_score(self):
        auc = self.validation_auc()
        return {"val_auc": auc, "select": auc}

    def run(self):
        for stage in self.cfg.stages:
            if stage == "A":
                self.stage_a()
            elif stage == "B":
                self.stage_b()
            elif stage == "C":
                self.stage_c()
            elif stage == "retrain" and self.cfg.epochs_retrain > 0:
                if self.cfg.cold_restart:
                    self.store = init_params(self.mcfg, self.cfg.seed + 1)
                self.stage_c("retrain", self.cfg.epochs_retrain)
        if self.cfg.epochs_retrain > 0 and "retrain" not in self.cfg.stages:
            if self.cfg.cold_restart:
                self.store = init_params(self.mcfg, self.cfg.seed + 1)
            self.stage_c("retrain", self.cfg.epochs_retrain)
        return TrainResult(self.store, self.mcfg, self.cfg, self.fill, self.log)


def _cls(pred, batch):
    return fusion.cls_loss(pred.y_prob, batch.y, batch.m_mri)


def _pred(pred, batch):
    return fusion.focal_loss(pred.c_prob, batch.c)


def train(cohort, model_cfg: ModelConfig, cfg: TrainConfig) -> TrainResult:
    """Train on a normalised cohort that carries a split assignment."""
    return Trainer(cohort, model_cfg, cfg).run()
