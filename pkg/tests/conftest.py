"""Shared fixtures.

The desk corpus (0.5 h train / 0.1 h test) and the two desk-trained models are
built once per session and kept in the pytest cache directory, so reruns skip
the ~10 minute build.  Set ``BCPVAD_DESK_DIR`` to put them elsewhere, or run
``pytest --cache-clear`` to force a fresh build.
"""

import os
from pathlib import Path

import numpy as np
import pytest

from bcpvad import corpus, net, training

DESK_SPEC = corpus.SynthSpec(seed=7, train_hours=0.5, test_hours=0.1)
DESK_MODEL_SEED = 0

ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "desk: needs the desk corpus and trained models")
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_lines(pytestconfig):
    return pytestconfig.stash[ACCEPTANCE_LINES]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_dir(request) -> Path:
    env = os.environ.get("BCPVAD_DESK_DIR")
    root = Path(env) if env else Path(request.config.cache.mkdir("bcpvad_desk"))
    root.mkdir(parents=True, exist_ok=True)
    return root


@pytest.fixture(scope="session")
def desk_manifest(desk_dir):
    data = desk_dir / "data"
    path = data / "manifest.json"
    if path.exists():
        m = corpus.load_manifest(data)
        if corpus.spec_from_manifest(m) == DESK_SPEC:
            return m
    corpus.build_dataset(DESK_SPEC, data)
    for stale in [*desk_dir.glob("model_*"), *desk_dir.glob("train_log_*"),
                  *data.glob("features_*.npz")]:
        stale.unlink()
    return corpus.load_manifest(data)


def _trained(desk_dir, manifest, channel):
    model_path = desk_dir / f"model_{channel}.json"
    log_path = desk_dir / f"train_log_{channel}.csv"
    if not (model_path.exists() and log_path.exists()):
        tr = training.load_features(manifest, "train", channel)
        te = training.load_features(manifest, "test", channel)
        params, history = training.train(tr, te, training.DESK_TRAIN,
                                         model_seed=DESK_MODEL_SEED)
        net.save_params(params, model_path, extra={"channel": channel})
        training.write_log_csv(history, log_path)
    return net.load_params(model_path), training.read_log_csv(log_path)


@pytest.fixture(scope="session")
def desk_bc(desk_dir, desk_manifest):
    return _trained(desk_dir, desk_manifest, "bc")


@pytest.fixture(scope="session")
def desk_ac(desk_dir, desk_manifest):
    return _trained(desk_dir, desk_manifest, "ac")


@pytest.fixture(scope="session")
def desk_test_bc(desk_manifest):
    return training.load_features(desk_manifest, "test", "bc")


@pytest.fixture(scope="session")
def desk_stems(desk_manifest):
    from bcpvad import evaluation
    return evaluation.load_test_stems(desk_manifest)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """Four short clips; enough for plumbing tests."""
    spec = corpus.SynthSpec(seed=3, clip_len_s=4.0, train_hours=3 * 4.0 / 3600,
                            test_hours=1 * 4.0 / 3600)
    out = tmp_path_factory.mktemp("tiny")
    corpus.build_dataset(spec, out)
    return corpus.load_manifest(out)


@pytest.fixture(scope="session")
def small_params():
    return net.init_params(net.CANONICAL_NET, seed=5)
