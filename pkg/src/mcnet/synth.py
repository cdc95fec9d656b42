"""Synthetic MCI cohorts with a two-dimensional latent state and scenario-based missingness.

Each subject has a severity trajectory ``s(t) = s0 + rate * years(t) + jitter``
and a nuisance trajectory.  Progressive subjects (pMCI) draw a steeper rate
and a higher starting severity, and convert once severity crosses
``threshold``.  MRI features are linear in the latent state; PET features are
``tanh`` of an affine image of it.  Only ``n_severity`` randomly chosen
feature indices load on severity, in both modalities; the rest load on the
nuisance factor.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .data import Cohort, SubjectRecord
from .errors import ConfigError

VISIT_YEARS = (0.0, 0.5, 1.0, 2.0, 3.0)
THRESHOLD = 1.0

# (low, high) uniform ranges; chosen so the class and the end-of-window
# threshold crossing agree up to the latent jitter
S0_RANGE = {0: (-1.2, 0.2), 1: (-0.2, 0.9)}
RATE_RANGE = {0: (0.0, 0.25), 1: (0.4, 0.8)}


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 600
    d: int = 20
    t: int = 5
    p_pet_bl_missing: float = 0.2
    p_mri_missing: float = 0.3
    p_pet_missing: float = 0.3
    attrition: float = 0.0
    noise_sd: float = 0.1
    class_balance: float = 0.4
    n_severity: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("p_pet_bl_missing", "p_mri_missing", "p_pet_missing", "attrition", "class_balance"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.n_subjects < 2:
            raise ConfigError("n_subjects must be at least 2")
        if self.d < 2:
            raise ConfigError("d must be at least 2")
        if self.t < 1:
            raise ConfigError("t must be at least 1")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be nonnegative")
        if not 1 <= self.n_severity <= self.d:
            raise ConfigError("n_severity must lie in [1, d]")

    @classmethod
    def from_mapping(cls, mapping):
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**mapping)


def visit_years(t):
    years = list(VISIT_YEARS[:t])
    while len(years) < t:
        years.append(years[-1] + 1.0)
    return np.array(years)


def _loadings(rng, d, loaded, sev_scale, nuis_scale):
    sev = np.zeros(d)
    nuis = np.zeros(d)
    sev[loaded] = -rng.uniform(*sev_scale, size=len(loaded))
    rest = np.setdiff1d(np.arange(d), loaded)
    nuis[rest] = rng.choice([-1.0, 1.0], size=len(rest)) * rng.uniform(*nuis_scale, size=len(rest))
    return sev, nuis


def generate_cohort(config: SynthConfig) -> Cohort:
    rng = np.random.default_rng(config.seed)
    n, d, t = config.n_subjects, config.d, config.t
    years = visit_years(t)

    loaded = np.sort(rng.choice(d, size=config.n_severity, replace=False))
    mri_sev, mri_nuis = _loadings(rng, d, loaded, (0.8, 1.2), (0.5, 1.0))
    mri_off = rng.normal(0.0, 0.3, size=d)
    pet_sev, pet_nuis = _loadings(rng, d, loaded, (0.6, 1.0), (0.4, 0.8))
    pet_off = rng.normal(0.0, 0.3, size=d)

    c_intent = (rng.random(n) < config.class_balance).astype(int)
    s0 = np.empty(n)
    rate = np.empty(n)
    for cls in (0, 1):
        idx = c_intent == cls
        s0[idx] = rng.uniform(*S0_RANGE[cls], size=idx.sum())
        rate[idx] = rng.uniform(*RATE_RANGE[cls], size=idx.sum())
    jitter = rng.normal(0.0, config.noise_sd, size=(n, t))
    jitter[:, 0] = 0.0
    severity = s0[:, None] + rate[:, None] * years[None, :] + jitter
    nuis0 = rng.normal(0.0, 1.0, size=n)
    drift = rng.normal(0.0, 0.1, size=n)
    nuisance = nuis0[:, None] + drift[:, None] * years[None, :]

    # status changes once severity has crossed the threshold; BL never has
    y = np.maximum.accumulate(severity >= THRESHOLD, axis=1).astype(int)
    y[:, 0] = 0
    c = y[:, -1].copy()

    x_mri = (severity[..., None] * mri_sev + nuisance[..., None] * mri_nuis + mri_off
             + rng.normal(0.0, config.noise_sd, size=(n, t, d)))
    x_pet = (np.tanh(severity[..., None] * pet_sev + nuisance[..., None] * pet_nuis + pet_off)
             + rng.normal(0.0, config.noise_sd, size=(n, t, d)))

    m_mri = np.ones((n, t), dtype=int)
    m_pet = np.ones((n, t), dtype=int)
    m_mri[:, 1:] = rng.random((n, t - 1)) >= config.p_mri_missing
    m_pet[:, 0] = rng.random(n) >= config.p_pet_bl_missing
    m_pet[:, 1:] = rng.random((n, t - 1)) >= config.p_pet_missing
    stay = rng.random((n, t)) >= config.attrition
    stay[:, 0] = True
    alive = np.logical_and.accumulate(stay, axis=1)
    m_mri *= alive
    m_pet *= alive

    width = len(str(n - 1))
    subjects = [
        SubjectRecord(
            subject_id=f"S{i:0{width}d}",
            x_mri=x_mri[i], x_pet=x_pet[i],
            m_mri=m_mri[i], m_pet=m_pet[i],
            y=y[i], c=int(c[i]),
        )
        for i in range(n)
    ]
    meta = {
        "severity_features": loaded.tolist(),
        "severity": severity,
        "nuisance": nuisance,
        "config": config,
    }
    return Cohort(subjects, meta=meta)
