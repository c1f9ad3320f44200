"""Independent classifier (IC), accuracy and Fréchet distance.

The IC is a single LSTM layer followed by one linear layer; its linear output
(pre-softmax, dimension K) doubles as the feature vector for FID. It is
trained on clean sequences only and never shares weights with the guidance
networks.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

from .denoiser import pad_batch
from .errors import LabelSpaceMismatchError, MissingClassError, NonFiniteFeaturesError

log = logging.getLogger(__name__)


class IndependentClassifier(nn.Module):
    def __init__(self, n_classes: int, n_landmarks: int = 68, hidden: int = 128, kind: str = "I"):
        super().__init__()
        self.n_classes = n_classes
        self.n_landmarks = n_landmarks
        self.hidden = hidden
        self.kind = kind
        self.lstm = nn.LSTM(n_landmarks * 3, hidden, batch_first=True)
        self.linear = nn.Linear(hidden, n_classes)
        # input standardisation, fitted on the training corpus
        self.register_buffer("in_mean", torch.zeros(n_landmarks * 3))
        self.register_buffer("in_std", torch.ones(n_landmarks * 3))

    @property
    def feature_dim(self) -> int:
        return self.n_classes

    def features(self, x: torch.Tensor, lengths=None) -> torch.Tensor:
        """Linear-layer output (B, K) for padded (B, F, N, 3) input."""
        B, Fmax = x.shape[:2]
        x = (x.reshape(B, Fmax, -1) - self.in_mean) / self.in_std
        if lengths is None:
            _, (h, _) = self.lstm(x)
        else:
            packed = pack_padded_sequence(x, torch.as_tensor(lengths).cpu(), batch_first=True,
                                          enforce_sorted=False)
            _, (h, _) = self.lstm(packed)
        return self.linear(h[-1])

    def forward(self, x, lengths=None):
        return self.features(x, lengths)


def _batches(seqs, size):
    for i in range(0, len(seqs), size):
        chunk = seqs[i:i + size]
        x, mask = pad_batch(chunk)
        yield x, mask.sum(1)


@torch.no_grad()
def ic_features(ic: IndependentClassifier, sequences, batch_size: int = 256) -> np.ndarray:
    ic.eval()
    seqs = [np.asarray(s, dtype=np.float32) for s in sequences]
    out = [ic.features(x, lengths) for x, lengths in _batches(seqs, batch_size)]
    return torch.cat(out).numpy().astype(np.float64)


def ic_predict(ic: IndependentClassifier, sequences) -> np.ndarray:
    return ic_features(ic, sequences).argmax(1)


def accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    if pred.shape != labels.shape:
        raise ValueError("prediction and label counts differ")
    return float((pred == labels).mean()) if pred.size else float("nan")


@dataclass
class ICTrainSettings:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    val_fraction: float = 0.1
    patience: int = 10
    seed: int = 0


def train_ic(sequences, labels, settings: ICTrainSettings | None = None, n_classes: int | None = None,
             kind: str = "I", hidden: int = 128) -> tuple[IndependentClassifier, float]:
    """Train an IC on clean (raw, un-normalised) sequences.

    Returns ``(ic, validation_accuracy)``; the weights kept are those of the
    best validation epoch.
    """
    settings = settings or ICTrainSettings()
    labels = np.asarray(labels, dtype=np.int64)
    K = int(n_classes if n_classes is not None else labels.max() + 1)
    missing = sorted(set(range(K)) - set(labels.tolist()))
    if missing:
        raise MissingClassError(f"no training sequences for classes {missing}")
    seqs = [np.asarray(s, dtype=np.float32) for s in sequences]
    rng = np.random.default_rng(settings.seed)
    order = rng.permutation(len(seqs))
    n_val = int(round(settings.val_fraction * len(seqs))) if len(seqs) >= 10 else 0
    val_idx, tr_idx = order[:n_val], order[n_val:]

    torch.manual_seed(settings.seed)
    ic = IndependentClassifier(K, seqs[0].shape[1], hidden, kind)
    flat = np.concatenate([seqs[i].reshape(len(seqs[i]), -1) for i in tr_idx])
    ic.in_mean.copy_(torch.as_tensor(flat.mean(0)))
    ic.in_std.copy_(torch.as_tensor(flat.std(0) + 1e-6))
    opt = torch.optim.Adam(ic.parameters(), lr=settings.lr)

    def val_acc():
        if not n_val:
            return float("nan")
        return accuracy(ic_predict(ic, [seqs[i] for i in val_idx]), labels[val_idx])

    best = (-1.0, {k: v.clone() for k, v in ic.state_dict().items()})
    stale = 0
    for epoch in range(settings.epochs):
        ic.train()
        perm = rng.permutation(tr_idx)
        for i in range(0, len(perm), settings.batch_size):
            idx = perm[i:i + settings.batch_size]
            x, mask = pad_batch([seqs[j] for j in idx])
            loss = F.cross_entropy(ic(x, mask.sum(1)), torch.as_tensor(labels[idx]))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        acc = val_acc()
        if not n_val or acc > best[0]:
            best, stale = (acc, {k: v.clone() for k, v in ic.state_dict().items()}), 0
        else:
            stale += 1
            if stale >= settings.patience:
                log.info("IC early stop at epoch %d", epoch + 1)
                break
    ic.load_state_dict(best[1])
    ic.eval()
    return ic, best[0]


# ---------------------------------------------------------------------------
# Fréchet distance


@dataclass
class FeatureGaussian:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def fit(cls, feats) -> "FeatureGaussian":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError(f"features must be (n, D), got {feats.shape}")
        if not np.isfinite(feats).all():
            raise NonFiniteFeaturesError("features contain NaN or inf")
        n, D = feats.shape
        if n < D + 1:
            warnings.warn(f"only {n} samples for {D}-dimensional features; covariance is rank-deficient",
                          RuntimeWarning, stacklevel=3)
        cov = np.cov(feats, rowvar=False).reshape(D, D) if n > 1 else np.zeros((D, D))
        return cls(feats.mean(0), 0.5 * (cov + cov.T))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureGaussian, b: FeatureGaussian) -> float:
    # tr sqrt(Sa Sb) = tr sqrt(Sa^1/2 Sb Sa^1/2), and the latter is symmetric PSD
    ra = _psd_sqrt(a.cov)
    cross = np.trace(_psd_sqrt(ra @ b.cov @ ra))
    diff = a.mean - b.mean
    val = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross
    return float(max(val, 0.0))


def fid(features_a, features_b) -> float:
    return frechet_distance(FeatureGaussian.fit(features_a), FeatureGaussian.fit(features_b))


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    accuracy: float
    fid: float
    n_generated: int
    n_reference: int

    def as_dict(self) -> dict:
        return {"acc": self.accuracy, "fid": self.fid, "n_generated": self.n_generated,
                "n_reference": self.n_reference}


def evaluate_generation(generated, intended_labels, reference, ic: IndependentClassifier) -> EvalReport:
    """IC accuracy against the intended labels and FID to the reference set."""
    intended = np.asarray(intended_labels, dtype=np.int64)
    if len(intended) != len(generated):
        raise ValueError("one intended label per generated sequence is required")
    if intended.size and (intended.min() < 0 or intended.max() >= ic.n_classes):
        raise LabelSpaceMismatchError(
            f"labels outside the IC's label space [0, {ic.n_classes - 1}]"
        )
    fg = ic_features(ic, generated)
    fr = ic_features(ic, reference)
    return EvalReport(accuracy(fg.argmax(1), intended), fid(fg, fr), len(generated), len(reference))


def write_report(path, rows: dict[str, EvalReport]) -> None:
    """Key=value text report at ``path`` and the same numbers as CSV alongside it."""
    path = Path(path)
    lines = []
    for name, rep in rows.items():
        for k, v in rep.as_dict().items():
            lines.append(f"{name}.{k}={v:.6g}" if isinstance(v, float) else f"{name}.{k}={v}")
    path.write_text("\n".join(lines) + "\n")
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["setting", "acc", "fid", "n_generated", "n_reference"])
        for name, rep in rows.items():
            w.writerow([name, f"{rep.accuracy:.6f}", f"{rep.fid:.6f}", rep.n_generated, rep.n_reference])
