import time

import numpy as np
import pytest

from rmn.data import SyntheticGrammar, dataset_from_videos, synth_generate
from rmn.model import RMN, ModelConfig
from rmn.train import ABLATIONS, preset, train

SYNTH_SEED = 7
SYNTH_VIDEOS = 50


def toy_model(selection="hard", estimator="straight_through", vocab=12, d_h=8, d_feat=5, seed=0):
    cfg = ModelConfig(vocab, d_feat, d_feat, d_feat, d_h=d_h, selection=selection, estimator=estimator)
    return RMN(cfg, seed)


def toy_features(rng, n=3, r=2, d=5):
    from rmn.data import RawFeatures

    return RawFeatures(rng.standard_normal((n, d)), rng.standard_normal((n, r, d)), rng.standard_normal((n, d)))


@pytest.fixture(scope="session")
def synth_videos():
    return synth_generate(SyntheticGrammar(), SYNTH_VIDEOS, SYNTH_SEED)


@pytest.fixture(scope="session")
def synth_dataset(synth_videos):
    return dataset_from_videos(synth_videos)


@pytest.fixture(scope="session")
def ablation_timed(synth_dataset):
    """All four settings trained once for the whole session (a few minutes), with wall times."""
    runs = {}
    for name, (mode, ling) in ABLATIONS.items():
        cfg = preset("synthetic", mode=mode, linguistic=ling, seed=0)
        t0 = time.perf_counter()
        result = train(cfg, synth_dataset)
        runs[name] = (cfg, result, time.perf_counter() - t0)
    return runs


@pytest.fixture(scope="session")
def ablation_runs(ablation_timed):
    return {name: (cfg, result) for name, (cfg, result, _) in ablation_timed.items()}


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion; returns the verdict."""
    def emit(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return emit


TRAINED_FIXTURES = {"ablation_runs", "ablation_timed"}


def pytest_collection_modifyitems(items):
    for item in items:
        if TRAINED_FIXTURES & set(getattr(item, "fixturenames", ())):
            item.add_marker(pytest.mark.slow)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
