"""Shared fixtures-by-function for tests that need trained models."""

from __future__ import annotations

import functools

import numpy as np

from polyvis.harness.config import default_config
from polyvis.harness.task import generate_task
from polyvis.training import run_pipeline


@functools.lru_cache(maxsize=None)
def default_run(seed: int):
    """Default toy config trained once per seed; returns (config, pipeline result, train, eval)."""
    cfg = default_config(seed)
    train, evals = generate_task(cfg.task, seed)
    return cfg, run_pipeline(cfg, train_set=train), train, evals


def least_squares_probe(x_train, y_train, x_test, y_test, n_classes: int) -> float:
    """One-vs-all least-squares linear probe; returns held-out accuracy."""
    X = np.hstack([x_train, np.ones((len(x_train), 1))])
    Y = np.eye(n_classes)[y_train]
    W, *_ = np.linalg.lstsq(X, Y, rcond=None)
    pred = np.argmax(np.hstack([x_test, np.ones((len(x_test), 1))]) @ W, axis=1)
    return float(np.mean(pred == y_test))
