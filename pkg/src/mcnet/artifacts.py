"""Saving and restoring trained models together with what is needed to reuse them."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import load_checkpoint, save_checkpoint
from .data import apply_normalization, stats_from_json, stats_to_json, with_split
from .errors import SchemaError
from .model import ModelConfig
from .training import TrainResult


@dataclass
class Model:
    """A trained parameter store plus its configuration, fill means and data preparation."""

    store: object
    model_cfg: ModelConfig
    fill: dict
    norm_stats: dict
    split_seed: int
    train_cfg: dict

    def prepare(self, cohort):
        """Apply the stored split and normalisation to a raw cohort."""
        if cohort.d != self.model_cfg.d or cohort.t != self.model_cfg.t:
            raise SchemaError(f"cohort has D={cohort.d}, T={cohort.t}; model expects "
                              f"D={self.model_cfg.d}, T={self.model_cfg.t}")
        return apply_normalization(with_split(cohort, self.split_seed), self.norm_stats)


def save_model(path, result: TrainResult, norm_stats, split_seed):
    meta = {
        "model": result.model_cfg.to_dict(),
        "train": result.cfg.to_dict(),
        "fill": {k: v.tolist() for k, v in result.fill.items()},
        "norm_stats": stats_to_json(norm_stats),
        "split_seed": int(split_seed),
    }
    save_checkpoint(path, result.store, meta)


def load_model(path) -> Model:
    store, meta = load_checkpoint(path)
    try:
        model_cfg = ModelConfig(**meta["model"])
        fill = {k: np.array(v, dtype=np.float64) for k, v in meta["fill"].items()}
        stats = stats_from_json(meta["norm_stats"])
        return Model(store, model_cfg, fill, stats, int(meta["split_seed"]), meta.get("train", {}))
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: checkpoint metadata incomplete ({exc})") from exc


def write_log(path, records):
    """Append-free rewrite of the training log, one JSON record per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

