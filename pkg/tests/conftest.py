"""Session-scoped fixtures shared by the acceptance tests.

Training the full four-quadrant classifier takes a couple of minutes on one
core, so the trained model, its held-out test set, and its compiled form are
built once per session and reused by every criterion that needs them.
"""
import time

import pytest

from bnnkit import compiler, data, netspec, train

TRAIN_PER_CLASS = 1000
TEST_PER_CLASS = 200
TRAIN_SEED = 11
TEST_SEED = 12
MODEL_SEED = 0
EPOCHS = 8


@pytest.fixture(scope="session")
def toy_train_set():
    return data.synth_quadrant_dataset(TRAIN_PER_CLASS, seed=TRAIN_SEED)


@pytest.fixture(scope="session")
def toy_test_set():
    return data.synth_quadrant_dataset(TEST_PER_CLASS, seed=TEST_SEED)


@pytest.fixture(scope="session")
def trained_quadrant_model(toy_train_set):
    """Trained n-CNV plus its training history and wall-clock seconds."""
    model = train.init_model(netspec.builtin_spec("n-cnv"), seed=MODEL_SEED)
    config = train.TrainConfig(epochs=EPOCHS, batch_size=64, lr=1e-3, seed=MODEL_SEED)
    start = time.monotonic()
    history = train.train_model(model, toy_train_set, config)
    elapsed = time.monotonic() - start
    return model, history, elapsed


@pytest.fixture(scope="session")
def compiled_quadrant_model(trained_quadrant_model):
    model, _, _ = trained_quadrant_model
    return compiler.compile_model(model)
