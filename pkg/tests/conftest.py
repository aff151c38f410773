import json

import pytest
import torch

from hsdlab.audiofeat import AugmentPolicy
from hsdlab.catalog import default_catalog
from hsdlab.cli import main
from hsdlab.model import ModelConfig
from hsdlab.pipeline import TrainConfig, synth_labeled_set
from hsdlab.synthgen import SynthSpec, gen_corpus

torch.set_num_threads(1)

SMALL_MODEL = ModelConfig(d=32, heads=2, audio_channels=(4, 8, 8, 8), dropout=0.1)


@pytest.fixture(scope="session")
def catalog():
    return default_catalog()


@pytest.fixture(scope="session")
def short_corpus(catalog):
    """40 recordings of 5 x 2 s, enough to exercise training and inference quickly."""
    return gen_corpus(SynthSpec(n_samples=40, site_duration_s=2.0, rng_seed=5), catalog)


@pytest.fixture(scope="session")
def short_sets(short_corpus):
    data = synth_labeled_set(short_corpus).cached()
    return data.subset(range(32)), data.subset(range(32, 40))


@pytest.fixture
def fast_train_cfg():
    return TrainConfig(epochs=2, warmup_epochs=1, batch_size=8, seed=0, augment=AugmentPolicy.default(seed=1))


CLI_CONFIG = {
    "synth": {"n_samples": 60, "site_duration_s": 2.0},
    "prepare": {"min_count": 2, "ratio": [1, 1]},
    "model": {"d": 32, "heads": 2, "audio_channels": [4, 8, 8, 8]},
    "train": {"epochs": 2, "warmup_epochs": 1, "batch_size": 8},
    "infer": {"n_descriptions": 2},
}


def write_cli_config(path, doc=None):
    path.write_text(json.dumps(doc or CLI_CONFIG, indent=1))
    return str(path)


def run_cli_pipeline(cfg_path, out):
    """prepare, train and eval into ``out``; returns the three exit codes."""
    return [main([cmd, "--config", cfg_path, "--out", str(out)]) for cmd in ("prepare", "train", "eval")]


def tree_bytes(root, skip=()):
    """Relative path -> file bytes for every file under ``root``."""
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.relative_to(root).as_posix() not in skip}


def manifest_without_timestamps(path):
    doc = json.loads(path.read_text())
    for k in ("started", "wall_seconds"):
        doc.pop(k, None)
    return doc


# --- acceptance summary ------------------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (ok, detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}", flush=True)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
