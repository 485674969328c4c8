import numpy as np
import pytest

from regrasp.datagen import CollectConfig, collect
from regrasp.model import (
    Calibration,
    ModelBundle,
    ModelConfig,
    TrainSchedule,
    fit_calibration,
    train,
)


@pytest.fixture(scope="session")
def small_dataset():
    """Real collected trials at test scale: 240 trials, 720 records."""
    cfg = CollectConfig(n_trials=240, object_set="train", seed=1234, trials_per_episode=12)
    dataset, manifest = collect(cfg)
    return dataset, manifest, cfg


@pytest.fixture(scope="session")
def small_model(small_dataset):
    """A small-preset predictor trained briefly on the session dataset, calibrated."""
    dataset, _, _ = small_dataset
    config = ModelConfig.small("fusion")
    schedule = TrainSchedule(total_iterations=700, lr_drop_iteration=600, seed=7)
    params, report = train(config, dataset, schedule)
    calibration = fit_calibration(config, params, dataset)
    bundle = ModelBundle(config=config, params=params, calibration=calibration)
    return bundle, report


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
