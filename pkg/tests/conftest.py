import time
from types import SimpleNamespace

import numpy as np
import pytest

from geotrack.matching import MatcherConfig, train_matcher
from geotrack.simulator import SimConfig, generate_scene, make_matching_dataset

APPEARANCE_DIM = 16


def training_configs(count=32, appearance_dim=APPEARANCE_DIM, base_seed=1000):
    """Noise-profile mixture over many object identities.

    Generalization across unseen identities needs identity diversity, and
    robustness needs exposure to both exact and corrupted geometry.
    """
    out = []
    for s in range(count):
        sigma_app = (0.05, 0.15, 0.3)[s % 3]
        center, depth = ((0.0, 0.0), (2.0, 0.05), (3.0, 0.08))[s % 3]
        miss = (0.0, 0.05, 0.1)[s % 3]
        fp = (0.0, 0.2, 0.4)[s % 3]
        out.append(
            SimConfig(
                seed=base_seed + s,
                n_frames=24,
                n_objects=8,
                appearance_dim=appearance_dim,
                appearance_sigma=sigma_app,
                center_sigma_px=center,
                depth_rel_sigma=depth,
                miss_rate=miss,
                fp_rate=fp,
                lateral_range=(-10, 10),
                depth_range=(12, 80),
            )
        )
    return out


@pytest.fixture(scope="session")
def trained_matcher():
    """Observation-route matcher used by tracking tests and the e2e criteria."""
    scenes = [generate_scene(c) for c in training_configs()]
    samples = make_matching_dataset(scenes, n_max=20, pairs_per_scene=12, seed=0)
    config = MatcherConfig(
        appearance_dim=APPEARANCE_DIM,
        epochs=30,
        seed=1,
        scorer_hidden=(64, 48, 32, 16, 8),
    )
    started = time.perf_counter()
    params, history = train_matcher(samples, config)
    elapsed = time.perf_counter() - started
    return SimpleNamespace(
        params=params,
        history=history,
        train_seconds=elapsed,
        config=config,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
