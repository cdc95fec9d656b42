"""Command-line entry point: generate, train, evaluate, impute, attribute, ablate.

Every command takes ``--seed`` (the only source of randomness) and an
optional ``--config`` file of flat ``key = value`` lines; ``#`` starts a
comment.  Keys are routed to the synthetic generator, the model or the
trainer by name.  Failures print one line ``error: <ClassName>: <message>``
to stderr and exit with status 1.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import evaluation, imputation
from .artifacts import load_model, save_model, write_log
from .data import Batch, denormalize_rows, load_cohort, normalize, train_folds, with_split, write_cohort
from .errors import ConfigError, McnetError
from .model import ModelConfig
from .synth import SynthConfig, generate_cohort
from .training import ABLATIONS, TrainConfig, train

log = logging.getLogger("mcnet")

CHECKPOINT = "model.ckpt"


def _coerce(text):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def read_config(path):
    """Parse a flat ``key = value`` file into a dict of ints, floats, bools and strings."""
    out = {}
    if path is None:
        return out
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            out[key] = _coerce(value)
    return out


def _split_keys(cfg, *classes):
    known = set()
    for cls in classes:
        known |= set(cls.__dataclass_fields__)
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")


def _require(path, what):
    if path is None:
        raise ConfigError(f"--{what} is required")
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _check_finite(obj):
    values = obj.values() if isinstance(obj, dict) else obj
    for v in values:
        if isinstance(v, float) and not math.isfinite(v):
            raise FloatingPointError(f"non-finite value in output: {v}")


def _out_dir(args):
    if args.out is None:
        raise ConfigError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _configs(args, cfg, ablate=None):
    _split_keys(cfg, ModelConfig, TrainConfig, SynthConfig)
    model_keys = {k: v for k, v in cfg.items() if k in ModelConfig.__dataclass_fields__}
    train_keys = {k: v for k, v in cfg.items() if k in TrainConfig.__dataclass_fields__}
    train_keys["seed"] = args.seed
    if args.stage:
        train_keys["stages"] = args.stage
    if ablate:
        train_keys["ablate"] = ablate
    return model_keys, TrainConfig.from_mapping(train_keys)


def _prepared(args, cohort):
    split_seed = args.seed
    return normalize(with_split(cohort, split_seed), train_folds()), split_seed


def cmd_generate(args, cfg):
    _split_keys(cfg, SynthConfig)
    if args.out is None:
        raise ConfigError("--out is required")
    synth = SynthConfig.from_mapping({**cfg, "seed": args.seed})
    cohort = generate_cohort(synth)
    write_cohort(args.out, cohort)
    meta = {"severity_features": cohort.meta["severity_features"], "config": synth.__dict__}
    Path(str(args.out) + ".meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def cmd_train(args, cfg):
    cohort = load_cohort(_require(args.cohort, "cohort"))
    model_keys, train_cfg = _configs(args, cfg, args.ablate)
    model_cfg = ModelConfig.from_mapping({"d": cohort.d, "t": cohort.t, **model_keys})
    data, split_seed = _prepared(args, cohort)
    out = _out_dir(args)
    result = train(data, model_cfg, train_cfg)
    for rec in result.log:
        _check_finite(rec["loss"])
    save_model(out / CHECKPOINT, result, data.norm_stats, split_seed)
    write_log(out / "train_log.jsonl", result.log)


def _load(args):
    model = load_model(_require(args.checkpoint, "checkpoint"))
    cohort = load_cohort(_require(args.cohort, "cohort"), t=model.model_cfg.t)
    return model, model.prepare(cohort)


def cmd_evaluate(args, cfg):
    model, data = _load(args)
    report = evaluation.evaluate_model(model, data, "test", bl_only=args.bl_only, mri_only=args.mri_only)
    _check_finite(report.to_dict())
    out = _out_dir(args)
    (out / "report.json").write_text(report.to_json() + "\n")


def cmd_impute(args, cfg):
    """Fill every missing row with the model's estimate, in original units, tagged by provenance."""
    model, data = _load(args)
    batch = Batch.from_subjects(data.subjects)
    x_hat_mri, x_hat_pet = evaluation.imputation_estimates(model, batch)
    if model.model_cfg.use_imputation:
        prov_mri, prov_pet = imputation.provenance(batch.m_mri, batch.m_pet)
    else:
        prov_mri = np.where(batch.m_mri > 0, "observed", "mean-fill").astype(object)
        prov_pet = np.where(batch.m_pet > 0, "observed", "mean-fill").astype(object)
    raw = load_cohort(args.cohort, t=model.model_cfg.t)
    subjects, provenance = [], {}
    for i, s in enumerate(raw.subjects):
        fields_ = {}
        for mod, x_hat, prov in (("mri", x_hat_mri, prov_mri), ("pet", x_hat_pet, prov_pet)):
            x = np.array(getattr(s, f"x_{mod}"), dtype=np.float64, copy=True)
            m = getattr(s, f"m_{mod}") > 0
            est = denormalize_rows(x_hat[i], model.norm_stats, mod)
            x[~m] = est[~m]
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"non-finite imputed value for {s.subject_id} {mod}")
            fields_[f"x_{mod}"] = x
            for t in range(s.t):
                provenance[(s.subject_id, t, mod)] = prov[i, t]
        subjects.append(type(s)(**{**s.__dict__, **fields_}))
    out = _out_dir(args)
    write_cohort(out / "imputed.csv", type(raw)(subjects), provenance)


def cmd_attribute(args, cfg):
    model, data = _load(args)
    k = int(cfg.get("top_k", args.top_k))
    result = evaluation.attribute_rois(model, data, k=k)
    out = _out_dir(args)
    with open(out / "attribution.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["modality", "visit_index", "rank", "feature", "importance"])
        for mod in ("mri", "pet"):
            imp = result[f"importance_{mod}"]
            for t, feats in enumerate(result[mod]):
                ranked = sorted(feats, key=lambda j: (-imp[t, j], j))
                for rank, j in enumerate(ranked, 1):
                    w.writerow([mod, t, rank, f"f{j}", repr(float(imp[t, j]))])


def cmd_ablate(args, cfg):
    cohort = load_cohort(_require(args.cohort, "cohort"))
    ablate = args.ablate
    model_keys, train_cfg = _configs(args, cfg)
    model_cfg = ModelConfig.from_mapping({"d": cohort.d, "t": cohort.t, **model_keys})
    variants = tuple(a.strip().upper() for a in (ablate or ",".join(ABLATIONS)).split(",") if a.strip())
    bad = [v for v in variants if v not in ABLATIONS]
    if bad or not variants:
        raise ConfigError(f"--ablate takes a nonempty subset of {','.join(ABLATIONS)}")
    variants = tuple(sorted(set(variants), key=ABLATIONS.index))
    data, _ = _prepared(args, cohort)
    reports = evaluation.run_ablation(data, model_cfg, train_cfg, ("full",) + variants,
                                      mri_only=args.mri_only)
    out = _out_dir(args)
    columns = ["n", "auc", "acc", "bacc", "mae_mri", "rmse_mri", "mae_pet", "rmse_pet"]
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant"] + columns)
        for name, rep in reports.items():
            row = rep.to_dict()
            _check_finite(row)
            w.writerow([name] + ["" if row[c] is None else repr(row[c]) for c in columns])


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "impute": cmd_impute,
    "attribute": cmd_attribute,
    "ablate": cmd_ablate,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="mcnet", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat key = value file")
    parser.add_argument("--cohort", help="cohort table (CSV)")
    parser.add_argument("--checkpoint", help="model checkpoint written by 'train'")
    parser.add_argument("--out", help="output file (generate) or directory (other commands)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--bl-only", action="store_true", help="restrict inputs to BL visits")
    parser.add_argument("--mri-only", action="store_true", help="drop BL PET from the inputs")
    parser.add_argument("--stage", help="comma-separated stages to run: A,B,C,retrain")
    parser.add_argument("--ablate", help="comma-separated subset of LC,CB,DI,AL")
    parser.add_argument("--top-k", type=int, default=10, help="features per visit for 'attribute'")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = read_config(args.config)
        COMMANDS[args.command](args, cfg)
    except (McnetError, OSError, ValueError, FloatingPointError, KeyError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
