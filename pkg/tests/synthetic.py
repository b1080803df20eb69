"""Small synthetic spike data sets shared by the test modules."""

import numpy as np

from gpn.datasets import BinnedDataset, SpikeEventSequence


def random_counts(n, steps, channels, n_classes, seed=0, rate=0.3):
    """Poisson counts with uniformly random labels (a memorization task)."""
    rng = np.random.default_rng(seed)
    x = rng.poisson(rate, size=(n, steps, channels)).astype(np.uint16)
    y = rng.integers(0, n_classes, size=n)
    return BinnedDataset(x, y)


def class_sequences(n, n_classes=4, channels=32, seed=0, events=60):
    """Event sequences whose active channel band encodes the label."""
    rng = np.random.default_rng(seed)
    band = channels // n_classes
    out = []
    for k in range(n):
        label = k % n_classes
        times = np.sort(rng.uniform(0, 1, events))
        units = rng.integers(label * band, (label + 1) * band, events)
        out.append(SpikeEventSequence(times, units, label, channels))
    return out
