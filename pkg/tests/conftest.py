"""Shared fixtures: a hand-checkable one-dimensional instance and tiny run configs."""

from dataclasses import replace

import numpy as np
import pytest
from loguru import logger

from isda_lab.config import ExperimentConfig
from isda_lab.covariance import CovarianceTracker
from isda_lab.losses import ClassifierHead


@pytest.fixture(autouse=True)
def quiet_logs():
    logger.remove()
    yield


@pytest.fixture
def unit_head() -> ClassifierHead:
    """A=1, C=2 head with w = [1, -1] and zero bias."""
    return ClassifierHead(np.array([[1.0], [-1.0]]), np.zeros(2))


@pytest.fixture
def unit_tracker() -> CovarianceTracker:
    """Full tracker whose class 0 has mean 1 and variance exactly 1."""
    tracker = CovarianceTracker(2, 1)
    tracker.update(np.array([[0.0], [2.0]]), np.array([0, 0]))
    return tracker


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    """Three small classes in four dimensions; a run takes a fraction of a second."""
    cfg = ExperimentConfig()
    return replace(
        cfg,
        data=replace(
            cfg.data, num_classes=3, input_dim=4, train_per_class=20, test_per_class=10
        ),
        model=replace(cfg.model, hidden=[8], feature_dim=4),
        optim=replace(cfg.optim, lr=0.05),
        semi=replace(cfg.semi, num_labeled=12),
        train=replace(cfg.train, epochs=3, batch_size=16, last_k=2),
        oracle=replace(cfg.oracle, mc_samples=200, bound_batch=16, explicit_m=3),
        sweep=replace(cfg.sweep, lambdas=[0.0, 0.5], m_values=[1, 2]),
    )
