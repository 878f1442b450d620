"""Shared fixtures: a trained toy model cached on disk across sessions."""
import hashlib
from dataclasses import dataclass
from pathlib import Path

import pytest

from strata.denoiser import ModelWeights, load_checkpoint, save_checkpoint, train
from strata.numerics import Rng
from strata.pipeline import (
    ToyDataset,
    config_text,
    dataset_spec_from,
    default_config,
    make_dataset,
    model_config_from,
    schedule_from,
    train_params_from,
)
from strata.sampler import NoiseSchedule

CACHE_DIR = Path(__file__).resolve().parent / "_cache"
# Keys that determine the trained weights; anything else (sampling, guidance,
# run layout) can change without invalidating the cache.
TRAIN_PREFIXES = ("data.", "model.", "schedule.", "train.")


def train_cache_key(cfg: dict) -> str:
    lines = [
        line
        for line in config_text(cfg).splitlines()
        if line.startswith(TRAIN_PREFIXES) and not line.startswith("model.checkpoint")
    ]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:12]


@dataclass
class TrainedModel:
    cfg: dict
    weights: ModelWeights
    dataset: ToyDataset
    schedule: NoiseSchedule


@pytest.fixture(scope="session")
def trained_model() -> TrainedModel:
    """Default-config model, trained once and reused via tests/_cache."""
    cfg = default_config()
    path = CACHE_DIR / f"model_{train_cache_key(cfg)}.bin"
    dataset = make_dataset(dataset_spec_from(cfg), Rng(cfg["data.seed"]))
    if not path.exists():
        weights, _ = train(
            dataset, model_config_from(cfg), train_params_from(cfg),
            Rng(cfg["train.seed"]),
        )
        CACHE_DIR.mkdir(exist_ok=True)
        save_checkpoint(weights, path)
    return TrainedModel(
        cfg=cfg,
        weights=load_checkpoint(path),
        dataset=dataset,
        schedule=schedule_from(cfg),
    )


_criterion_lines: list[str] = []


@pytest.fixture
def criterion_report():
    """Collect one summary line per acceptance criterion."""
    return _criterion_lines.append


def pytest_terminal_summary(terminalreporter):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in _criterion_lines:
            terminalreporter.write_line(line)
