import time

import numpy as np
import pytest

from specdet.config import TrainConfig
from specdet.data import SynthConfig, load_dataset, split_train_val, synthesize
from specdet.irfdm import abs_cosine
from specdet.train import evaluate_model, train

OVERFIT_SAMPLES = 32
OVERFIT_SIZE = 64
OVERFIT_SEED = 7
OVERFIT_EPOCHS = 300


class OverfitRun:
    def __init__(self, root):
        self.root = root
        synthesize(SynthConfig(num_samples=OVERFIT_SAMPLES, image_size=OVERFIT_SIZE, seed=OVERFIT_SEED), root)
        self.samples = load_dataset(root)
        self.cfg = TrainConfig(image_size=OVERFIT_SIZE, epochs=OVERFIT_EPOCHS, seed=OVERFIT_SEED, eval_every=0)
        start = time.process_time()
        self.model, self.rows = train(self.cfg, self.samples)
        self.seconds = time.process_time() - start
        self.train_set, self.val_set = split_train_val(self.samples, self.cfg.val_fraction)
        self.train_map50 = evaluate_model(self.model, self.train_set).map50

    def w_ir(self):
        return self.model.modality_weights(self.samples)

    def mean_abs_cos(self):
        vals = []
        for vis, ir in self.model.embeddings(self.samples):
            vals.extend(abs_cosine(vis))
            vals.extend(abs_cosine(ir))
        return float(np.mean(vals))


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    return OverfitRun(tmp_path_factory.mktemp("overfit"))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    synthesize(SynthConfig(num_samples=6, image_size=32, seed=3), root)
    return root


ACCEPTANCE_LINES = []


@pytest.fixture
def record():
    """Stores one pass/fail line per acceptance criterion for the end-of-run summary."""

    def _record(name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
