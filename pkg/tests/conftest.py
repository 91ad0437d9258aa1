import os

# Pin BLAS threading before numpy loads anywhere: keeps timings stable and
# floating-point reductions identical across test processes.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from capdistill import synthworld  # noqa: E402


@pytest.fixture(scope="session")
def tiny_world_cfg():
    return synthworld.WorldConfig(
        n_train=24, n_val=8, n_test=8, n_audio_only=16,
        n_frames=30, n_mels=8, n_event_types=4, noise_sigma=0.05,
        min_event_frames=4, max_event_frames=8, max_events=2,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tiny_world_cfg):
    return synthworld.generate_dataset(tiny_world_cfg, seed=11)


def rng(seed):
    return np.random.default_rng(seed)
