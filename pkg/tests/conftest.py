"""Shared fixtures for the albumseq test suite.

Expensive artifacts (synthetic datasets, trained models) are built once per
session and reused by every test that needs them.
"""

import numpy as np
import pytest

from albumseq.data import GenConfig, generate_synthetic


@pytest.fixture(scope="session")
def tiny_world():
    """A small co-occurrence world: fast to generate, fast to traverse."""
    cfg = GenConfig(
        num_identities=12,
        num_groups=4,
        num_scenes=2,
        feature_dim=6,
        scene_feature_dim=6,
        cluster_size=3,
        cluster_separation=1.0,
        photos_per_split=40,
        seed=5,
    )
    pair, vocab, meta = generate_synthetic(cfg)
    return cfg, pair, vocab, meta


@pytest.fixture(scope="session")
def tiny_trained_model(tiny_world):
    """A briefly trained sequence model over the tiny world."""
    from albumseq.layers import EmbedMode
    from albumseq.training import TrainConfig, train

    _, pair, vocab, _ = tiny_world
    cfg = TrainConfig(
        embed_dim=12,
        hidden_dim=12,
        unroll=8,
        learning_rate=2e-3,
        total_epochs=6,
        decay_epoch=5,
        batch_size=8,
        mode=EmbedMode.MAX,
        use_scene=True,
        region="head",
        seed=3,
    )
    params, report = train(pair.set_0, cfg, vocab.num_identities)
    return cfg, params, report


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def full_gradcheck_run():
    """The 10-seed finite-difference suite, timed, computed once per session."""
    import time

    from albumseq.gradcheck import gradcheck_suite

    start = time.perf_counter()
    results = gradcheck_suite(dim=6, seeds=range(10))
    elapsed = time.perf_counter() - start
    return results, elapsed
