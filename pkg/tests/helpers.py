"""Small shared utilities for the test-suite."""

import copy

import numpy as np
import torch

from fex4d.denoiser import DenoiserConfig

TINY = DenoiserConfig(layers=2, heads=2, model_dim=32, feedforward_dim=64, dropout=0.0, max_len=64)


def float64_copy(model):
    m = copy.deepcopy(model).double()
    m.eval()
    return m


def central_difference(fn, x: torch.Tensor, idx, h: float = 1e-6) -> float:
    """d fn / d x[idx] by central differences on a float64 tensor (modified in place, then restored)."""
    with torch.no_grad():
        old = x[idx].item()
        x[idx] = old + h
        up = fn().item()
        x[idx] = old - h
        down = fn().item()
        x[idx] = old
    return (up - down) / (2 * h)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def toy_corpus(n=64, F=12, seed=0):
    """Two classes with disjoint coordinate supports: class 0 moves the x of the
    first half of the landmarks, class 1 the y of the second half."""
    rng = np.random.default_rng(seed)
    seqs, labels = [], []
    for i in range(n):
        c = i % 2
        x = rng.normal(0, 0.1, (F, 68, 3))
        ramp = np.linspace(0, 2, F)[:, None]
        if c == 0:
            x[:, :34, 0] += ramp
        else:
            x[:, 34:, 1] += ramp
        seqs.append(x.astype(np.float32))
        labels.append(c)
    return seqs, np.array(labels)
