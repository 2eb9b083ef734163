"""Flat key=value configuration files for the CLI and the CV pipeline.

Format: one ``key = value`` pair per line, ``#`` comments, blank lines
ignored. Nested settings use dotted keys (``forecaster.epochs = 100``).
Unknown keys are rejected so typos fail loudly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .annotator import AnnotatorTrainConfig
from .cohort import FEATURES, CohortError
from .crbm import GibbsChainConfig
from .forecaster import TrainConfig
from .synth import CLINICAL_CROSS_CORR, SynthConfig


class ConfigError(ValueError):
    """Unparseable or inconsistent configuration."""


def parse_kv_file(path: str | Path) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{line_no}: expected key = value")
        key, value = text.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


class _KV:
    def __init__(self, pairs: dict[str, str]):
        self.pairs = dict(pairs)
        self.used: set[str] = set()

    def take(self, key: str, default=None):
        self.used.add(key)
        return self.pairs.get(key, default)

    def take_int(self, key: str, default: int) -> int:
        raw = self.take(key)
        return default if raw is None else int(raw)

    def take_float(self, key: str, default: float) -> float:
        raw = self.take(key)
        return default if raw is None else float(raw)

    def finish(self) -> None:
        unknown = set(self.pairs) - self.used
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")


def _cross_corr_from_spec(spec: str) -> np.ndarray:
    if spec == "clinical":
        return CLINICAL_CROSS_CORR.copy()
    if spec == "identity":
        return np.eye(len(FEATURES))
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"cross_corr must be 'clinical', 'identity' or a CSV path, got {spec!r}")
    matrix = np.loadtxt(path, delimiter=",", dtype=np.float64)
    return matrix


def _synth_from_kv(kv: _KV, prefix: str = "") -> SynthConfig:
    p = prefix
    prevalence_raw = kv.take(f"{p}target_prevalence")
    if prevalence_raw in (None, "", "none"):
        prevalence = None if prevalence_raw == "none" else 0.07
    else:
        prevalence = float(prevalence_raw)
    config = SynthConfig(
        n_patients=kv.take_int(f"{p}n_patients", 875),
        visit_count_mean=kv.take_float(f"{p}visit_count_mean", 19.0),
        visit_count_sd=kv.take_float(f"{p}visit_count_sd", 9.0),
        ar_coefficient=kv.take_float(f"{p}ar_coefficient", 0.85),
        cross_corr_target=_cross_corr_from_spec(kv.take(f"{p}cross_corr", "clinical")),
        noise_scale=kv.take_float(f"{p}noise_scale", 0.35),
        obs_noise=kv.take_float(f"{p}obs_noise", 0.25),
        pd_rule_threshold=kv.take_float(f"{p}pd_rule_threshold", 0.35),
        target_prevalence=prevalence,
        seed=kv.take_int(f"{p}seed", 0),
    )
    config.validate()
    return config


def load_synth_config(path: str | Path, seed_override: int | None = None) -> SynthConfig:
    kv = _KV(parse_kv_file(path))
    config = _synth_from_kv(kv)
    kv.finish()
    if seed_override is not None:
        config.seed = seed_override
    return config


@dataclass
class RunConfig:
    """Everything one cross-validated experiment needs."""

    seed: int = 0
    k: int = 5
    beta: float = 5.0
    sfl_mode: str = "temporal"
    cohort_path: str | None = None
    synth: SynthConfig | None = None
    forecaster_train: TrainConfig = field(default_factory=TrainConfig)
    annotator_train: AnnotatorTrainConfig = field(default_factory=AnnotatorTrainConfig)
    gibbs: GibbsChainConfig = field(default_factory=GibbsChainConfig)
    eval_gibbs: GibbsChainConfig = field(
        default_factory=lambda: GibbsChainConfig(steps=32, n_samples=200)
    )
    eval_m_max: int = 5
    eval_n_max: int | None = None

    def validate(self) -> None:
        if self.k < 2:
            raise ConfigError("k must be >= 2")
        if self.cohort_path is None and self.synth is None:
            raise ConfigError("config needs either cohort = <path> or synth.* settings")
        if self.sfl_mode not in ("temporal", "involved"):
            raise ConfigError("sfl_mode must be 'temporal' or 'involved'")


def load_run_config(path: str | Path, seed_override: int | None = None) -> RunConfig:
    kv = _KV(parse_kv_file(path))
    cohort_path = kv.take("cohort")
    synth = None
    if cohort_path is None:
        synth = _synth_from_kv(kv, "synth.")
    config = RunConfig(
        seed=kv.take_int("seed", 0),
        k=kv.take_int("k", 5),
        beta=kv.take_float("beta", 5.0),
        sfl_mode=kv.take("sfl_mode", "temporal"),
        cohort_path=cohort_path,
        synth=synth,
        forecaster_train=TrainConfig(
            epochs=kv.take_int("forecaster.epochs", 100),
            batch_size=kv.take_int("forecaster.batch_size", 32),
            learning_rate=kv.take_float("forecaster.learning_rate", 1e-4),
            cd_k=kv.take_int("forecaster.cd_k", 1),
        ),
        annotator_train=AnnotatorTrainConfig(
            epochs=kv.take_int("annotator.epochs", 200),
            batch_size=kv.take_int("annotator.batch_size", 128),
            learning_rate=kv.take_float("annotator.learning_rate", 1e-4),
        ),
        gibbs=GibbsChainConfig(
            steps=kv.take_int("gibbs.steps", 32),
            n_samples=kv.take_int("gibbs.n_samples", 1000),
        ),
        eval_gibbs=GibbsChainConfig(
            steps=kv.take_int("eval.steps", 32),
            n_samples=kv.take_int("eval.n_samples", 200),
        ),
        eval_m_max=kv.take_int("eval.m_max", 5),
        eval_n_max=(lambda raw: None if raw is None else int(raw))(kv.take("eval.n_max")),
    )
    kv.finish()
    if seed_override is not None:
        config.seed = seed_override
        if config.synth is not None:
            config.synth.seed = seed_override
    config.validate()
    return config


def config_echo(config: RunConfig) -> dict:
    """JSON-ready view of a run configuration for the output manifest."""
    synth = None
    if config.synth is not None:
        synth = {
            "n_patients": config.synth.n_patients,
            "visit_count_mean": config.synth.visit_count_mean,
            "visit_count_sd": config.synth.visit_count_sd,
            "ar_coefficient": config.synth.ar_coefficient,
            "noise_scale": config.synth.noise_scale,
            "obs_noise": config.synth.obs_noise,
            "pd_rule_threshold": config.synth.pd_rule_threshold,
            "target_prevalence": config.synth.target_prevalence,
            "seed": config.synth.seed,
            "cross_corr": [[float(v) for v in row] for row in config.synth.cross_corr_target],
        }
    return {
        "seed": config.seed,
        "k": config.k,
        "beta": config.beta,
        "sfl_mode": config.sfl_mode,
        "cohort_path": config.cohort_path,
        "synth": synth,
        "forecaster_train": {
            "epochs": config.forecaster_train.epochs,
            "batch_size": config.forecaster_train.batch_size,
            "learning_rate": config.forecaster_train.learning_rate,
            "weight_decay": config.forecaster_train.weight_decay,
            "cd_k": config.forecaster_train.cd_k,
        },
        "annotator_train": {
            "epochs": config.annotator_train.epochs,
            "batch_size": config.annotator_train.batch_size,
            "learning_rate": config.annotator_train.learning_rate,
            "weight_decay": config.annotator_train.weight_decay,
        },
        "gibbs": {"steps": config.gibbs.steps, "n_samples": config.gibbs.n_samples},
        "eval_gibbs": {"steps": config.eval_gibbs.steps, "n_samples": config.eval_gibbs.n_samples},
        "eval_m_max": config.eval_m_max,
        "eval_n_max": config.eval_n_max,
    }
