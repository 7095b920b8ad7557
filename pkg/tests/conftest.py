import json
import logging
from pathlib import Path

import numpy as np
import pytest
import torch

from cnntsp.model import CNNTransformer, ModelConfig
from cnntsp.training import RunConfig, TrainerConfig, train

DATA = Path(__file__).parent / "data"

# Desk-scale recipe used by the learning criterion and the trained-model checks.
DESK_MODEL = ModelConfig(L=3, d=64, heads=4, ff_width=256, k=4, m=10)
DESK_TRAINER = TrainerConfig(epochs=20, instances_per_epoch=10_000, batch_size=128,
                             learning_rate=1e-4, n=10, seed=1234, eval_set_size=1000)

_acceptance = []


_DESK_FIXTURES = {"desk_run", "desk_model", "untrained_desk_model"}


def pytest_collection_modifyitems(items):
    # anything that needs the trained desk model pays for training on a cold cache
    for item in items:
        if _DESK_FIXTURES & set(getattr(item, "fixturenames", ())):
            item.add_marker(pytest.mark.slow)


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        _acceptance.append((report.nodeid.split("::")[-1], report.outcome, report.duration))
    elif report.when == "setup" and report.failed and "test_acceptance" in report.nodeid:
        _acceptance.append((report.nodeid.split("::")[-1], "error", report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, secs in _acceptance:
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}  ({secs:.1f}s)")


@pytest.fixture
def data_dir():
    return DATA


def small_model(dtype=torch.float64, seed=0, **overrides) -> CNNTransformer:
    cfg = dict(L=1, d=8, heads=2, ff_width=32, k=2, m=3)
    cfg.update(overrides)
    model = CNNTransformer(ModelConfig(**cfg), seed=seed)
    return model.to(dtype)


@pytest.fixture
def tiny_model():
    return small_model()


@pytest.fixture(scope="session")
def desk_run(request):
    """Train the desk-scale TSP10 recipe once; cached across sessions under .pytest_cache.

    ``pytest --cache-clear`` forces a fresh run.
    """
    run = RunConfig(DESK_TRAINER, DESK_MODEL)
    root = Path(request.config.cache.mkdir("desk_tsp10"))
    marker = root / "done.json"
    final = root / f"epoch_{DESK_TRAINER.epochs:03d}.ckpt"
    if marker.exists() and json.loads(marker.read_text()) == run.to_dict() and final.exists():
        return root
    logging.getLogger("cnntsp").info("training desk model into %s", root)
    train(run, root)
    marker.write_text(json.dumps(run.to_dict()))
    return root


@pytest.fixture(scope="session")
def desk_model(desk_run):
    return CNNTransformer.load(desk_run / f"epoch_{DESK_TRAINER.epochs:03d}.ckpt")


@pytest.fixture(scope="session")
def untrained_desk_model(desk_run):
    return CNNTransformer.load(desk_run / "epoch_000.ckpt")


def rng_coords(seed, n, count=None):
    rng = np.random.default_rng(seed)
    shape = (n, 2) if count is None else (count, n, 2)
    return rng.random(shape)
