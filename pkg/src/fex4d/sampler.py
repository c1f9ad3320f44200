"""Ancestral sampling and the plug-and-play conditioning procedures.

All samplers work on batched tensors of shape (B, F, N, 3) in the normalised
data space and take a ``torch.Generator`` for reproducibility. Models are
plain callables, which keeps the samplers testable with analytic probes:

* ``denoiser(x_t, t) -> eps_hat`` (same shape as ``x_t``)
* ``classifier(x, t) -> log-probs`` of shape (B, K)
* ``text_head(x, t) -> (B, D)`` vectors compared by cosine similarity

Guided steps start from the stochastic draw mu + sigma_t z of the unguided
chain and then take a fixed number of Adagrad ascent steps on

    lam * log N(x; mu, sigma_t^2 I) + guidance(x, t - 1)

with the guidance network evaluated at step ``max(t - 1, 1)``.

Frame indices in :class:`FrameMask` are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import N2E
from .errors import (EmptyMaskError, InvalidRangeError, LengthExceededError, NonFiniteStateError,
                     ShapeMismatchError, UntrainedModelError)
from .schedule import LatentState, NoiseSchedule, posterior_mean, q_sample


@dataclass
class GuidanceConfig:
    lam: float = 0.01
    opt_steps: int = 3
    opt_lr: float = 0.05
    harmonization_iters: int = 5

    def __post_init__(self):
        if not self.lam > 0:
            raise InvalidRangeError(f"lam must be > 0, got {self.lam}")
        if self.opt_steps < 1 or self.harmonization_iters < 1:
            raise InvalidRangeError("opt_steps and harmonization_iters must be >= 1")
        if not self.opt_lr > 0:
            raise InvalidRangeError(f"opt_lr must be > 0, got {self.opt_lr}")


@dataclass
class Models:
    denoiser: Callable
    classifier: Callable | None = None
    text_head: Callable | None = None


@dataclass
class FrameMask:
    """Known frame indices (0-based, sorted) of a length-``F`` sequence and their values."""

    F: int
    known: np.ndarray
    known_frames: np.ndarray

    def __post_init__(self):
        known = np.unique(np.asarray(self.known, dtype=np.int64))
        if known.size != np.size(self.known):
            raise InvalidRangeError("duplicate known frame indices")
        if known.size and (known[0] < 0 or known[-1] >= self.F):
            raise InvalidRangeError(f"known indices must lie in [0, {self.F - 1}]")
        self.known = known
        frames = np.asarray(self.known_frames)
        if frames.ndim != 3 or frames.shape[0] != known.size:
            raise ShapeMismatchError(
                f"known_frames must be ({known.size}, N, 3), got {frames.shape}"
            )
        self.known_frames = frames

    @property
    def unknown(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.F), self.known)

    @classmethod
    def from_sequence(cls, seq: np.ndarray, known) -> "FrameMask":
        known = np.asarray(known, dtype=np.int64)
        F = seq.shape[0]
        if known.size and (known.min() < 0 or known.max() >= F):
            raise InvalidRangeError(f"known indices must lie in [0, {F - 1}]")
        return cls(F=F, known=known, known_frames=np.asarray(seq)[np.sort(known)])

    def dense(self, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        """(F,) bool known-indicator and (F, N, 3) values with zeros in unknown rows."""
        ind = torch.zeros(self.F, dtype=torch.bool)
        ind[torch.as_tensor(self.known)] = True
        vals = torch.zeros((self.F,) + self.known_frames.shape[1:], dtype=dtype)
        vals[torch.as_tensor(self.known)] = torch.as_tensor(self.known_frames, dtype=dtype)
        return ind, vals


def _rng_l(rng: np.random.Generator, lo: int, hi: int) -> int:
    return int(rng.integers(lo, hi + 1))


def ffe_known(F: int, rng: np.random.Generator) -> np.ndarray:
    """Filling the end: the first l frames are given, l ~ U{10..30}."""
    l = min(_rng_l(rng, 10, 30), F - 1)
    return np.arange(l)


def ffb_known(F: int, rng: np.random.Generator) -> np.ndarray:
    """Filling the beginning: the last l frames are given, l ~ U{10..30}."""
    l = min(_rng_l(rng, 10, 30), F - 1)
    return np.arange(F - l, F)


def ffm_known(F: int, rng: np.random.Generator) -> np.ndarray:
    """Filling the middle: l frames at each end are given, l ~ U{5..15}."""
    l = min(_rng_l(rng, 5, 15), (F - 1) // 2)
    return np.concatenate([np.arange(l), np.arange(F - l, F)])


PROTOCOLS = {"FFE": ffe_known, "FFB": ffb_known, "FFM": ffm_known}


def protocol_mask(seq: np.ndarray, protocol: str, rng: np.random.Generator) -> FrameMask:
    try:
        fn = PROTOCOLS[protocol.upper()]
    except KeyError:
        raise InvalidRangeError(f"unknown filling protocol {protocol!r}; expected FFE, FFM or FFB") from None
    return FrameMask.from_sequence(seq, fn(seq.shape[0], rng))


def mean_imputation(mask: FrameMask) -> np.ndarray:
    """Baseline completion: every unknown frame is the per-coordinate mean of the known frames."""
    if mask.known.size == 0:
        raise EmptyMaskError("mean imputation needs at least one known frame")
    out = np.empty((mask.F,) + mask.known_frames.shape[1:], dtype=mask.known_frames.dtype)
    out[:] = mask.known_frames.mean(axis=0)
    out[mask.known] = mask.known_frames
    return out


# ---------------------------------------------------------------------------
# building blocks


def fluency_log_density(x: torch.Tensor, mu: torch.Tensor, var, batched: bool = True) -> torch.Tensor:
    """-||x - mu||^2 / (2 var), the Gaussian log-density with its constant dropped.

    Reduced over every axis but the leading batch axis, or over all axes when
    ``batched`` is False.
    """
    sq = (x - mu) ** 2
    if batched and sq.dim() > 1:
        sq = sq.flatten(1).sum(1)
    else:
        sq = sq.sum()
    return -sq / (2.0 * var)


def adagrad_ascent(x: torch.Tensor, objective: Callable[[torch.Tensor], torch.Tensor],
                   steps: int, lr: float, eps: float = 1e-10, history: list | None = None) -> torch.Tensor:
    """Maximise ``objective`` (per-item values, summed) by ``steps`` Adagrad updates.

    The accumulator starts at zero, so the first update moves every
    coordinate by lr * g / (|g| + eps).
    """
    x = x.detach()
    acc = torch.zeros_like(x)
    for _ in range(steps):
        xr = x.clone().requires_grad_(True)
        with torch.enable_grad():
            val = objective(xr)
            if not torch.isfinite(val).all():
                raise NonFiniteStateError("guidance objective is not finite")
            (g,) = torch.autograd.grad(val.sum(), xr)
        if history is not None:
            history.append((x.clone(), val.detach()))
        acc = acc + g * g
        x = x + lr * g / (acc.sqrt() + eps)
    return x


def _check_finite(x: torch.Tensor, t: int) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteStateError(f"non-finite sampler state at step {t}")
    return x


def _require_trained(model, what: str):
    if model is None:
        raise UntrainedModelError(f"{what} is required for this sampler")
    if getattr(model, "trained", True) is False:
        raise UntrainedModelError(f"{what} has not been trained")


def _randn(shape, gen, like=None) -> torch.Tensor:
    dtype = like.dtype if like is not None else torch.float32
    return torch.randn(shape, generator=gen, dtype=dtype)


def unguided_draw(x_t: torch.Tensor, t: int, denoiser, schedule: NoiseSchedule, gen):
    """(mu, mu + sigma_t z) for one reverse step; z = 0 at t = 1."""
    with torch.no_grad():
        eps_hat = denoiser(x_t, t)
    mu = posterior_mean(x_t, eps_hat, t, schedule)
    if t > 1:
        return mu, mu + float(schedule.sigma[t - 1]) * _randn(x_t.shape, gen, x_t)
    return mu, mu.clone()


def _guided(state: LatentState, term, models: Models, schedule: NoiseSchedule,
            config: GuidanceConfig, gen, opt_steps: int | None = None) -> LatentState:
    t = state.t
    if t < 1:
        raise InvalidRangeError("cannot step below t = 0")
    mu, x_hat = unguided_draw(state.x, t, models.denoiser, schedule, gen)
    var = float(schedule.beta[t - 1])
    t_g = max(t - 1, 1)

    def objective(x):
        return config.lam * fluency_log_density(x, mu, var) + term(x, t_g)

    steps = config.opt_steps if opt_steps is None else opt_steps
    x = adagrad_ascent(x_hat, objective, steps, config.opt_lr)
    return LatentState(_check_finite(x, t), t - 1)


def _label_term(classifier, y, batch: int):
    y = torch.as_tensor(y).long()
    if y.dim() == 0:
        y = y.expand(batch)

    def term(x, t):
        return classifier(x, t).gather(1, y[:, None].to(x.device))[:, 0]
    return term


def _text_term(head, target):
    target = torch.as_tensor(np.asarray(target), dtype=torch.float32)

    def term(x, t):
        v = head(x, t)
        return F.cosine_similarity(v, target.to(v.dtype).expand_as(v), dim=-1)
    return term


def guided_step_label(state: LatentState, y, models: Models, schedule: NoiseSchedule,
                      config: GuidanceConfig, gen, opt_steps: int | None = None) -> LatentState:
    _require_trained(models.classifier, "classifier")
    term = _label_term(models.classifier, y, state.x.shape[0])
    return _guided(state, term, models, schedule, config, gen, opt_steps)


def guided_step_text(state: LatentState, target, models: Models, schedule: NoiseSchedule,
                     config: GuidanceConfig, gen, opt_steps: int | None = None) -> LatentState:
    _require_trained(models.text_head, "text alignment head")
    return _guided(state, _text_term(models.text_head, target), models, schedule, config, gen, opt_steps)


def _init_noise(n: int, F: int, n_landmarks: int, gen) -> torch.Tensor:
    return _randn((n, F, n_landmarks, 3), gen)


def _check_length(models: Models, F: int):
    cfg = getattr(models.denoiser, "config", None)
    if F < 2:
        raise InvalidRangeError(f"sequence length must be >= 2, got {F}")
    if cfg is not None and F > cfg.max_len:
        raise LengthExceededError(f"length {F} exceeds max_len {cfg.max_len}")


def _as_models(models) -> Models:
    return models if isinstance(models, Models) else Models(denoiser=models)


# ---------------------------------------------------------------------------
# samplers


def sample_unconditional(F: int, models, schedule: NoiseSchedule, gen, n: int = 1,
                         n_landmarks: int = 68) -> torch.Tensor:
    models = _as_models(models)
    _check_length(models, F)
    x = _init_noise(n, F, n_landmarks, gen)
    for t in range(schedule.T, 0, -1):
        _, x = unguided_draw(x, t, models.denoiser, schedule, gen)
        _check_finite(x, t)
    return x


def sample_label_control(F: int, y, models: Models, schedule: NoiseSchedule, config: GuidanceConfig,
                         gen, n: int = 1, n_landmarks: int = 68) -> torch.Tensor:
    """Label-guided generation; ``y`` is one label or one per batch item."""
    _check_length(models, F)
    _require_trained(models.classifier, "classifier")
    state = LatentState(_init_noise(n, F, n_landmarks, gen), schedule.T)
    while state.t > 0:
        state = guided_step_label(state, y, models, schedule, config, gen)
    return state.x


def sample_text_control(F: int, prompt: str, models: Models, provider, schedule: NoiseSchedule,
                        config: GuidanceConfig, gen, n: int = 1, n_landmarks: int = 68) -> torch.Tensor:
    _check_length(models, F)
    _require_trained(models.text_head, "text alignment head")
    target = provider(prompt)
    state = LatentState(_init_noise(n, F, n_landmarks, gen), schedule.T)
    while state.t > 0:
        state = guided_step_text(state, target, models, schedule, config, gen)
    return state.x


def _stack_masks(masks: FrameMask | Sequence[FrameMask], n: int):
    if isinstance(masks, FrameMask):
        masks = [masks] * n
    masks = list(masks)
    if not masks:
        raise EmptyMaskError("no masks given")
    Fs = {m.F for m in masks}
    if len(Fs) != 1:
        raise ShapeMismatchError(f"masks in one batch must share a length, got {sorted(Fs)}")
    for m in masks:
        if m.known.size == 0:
            raise EmptyMaskError("S_K is empty; use sample_unconditional instead")
    dense = [m.dense() for m in masks]
    ind = torch.stack([d[0] for d in dense])[:, :, None, None]
    vals = torch.stack([d[1] for d in dense])
    return masks[0].F, ind, vals


def _known_at(vals: torch.Tensor, t: int, schedule: NoiseSchedule, gen) -> torch.Tensor:
    if t == 0:
        return vals
    return q_sample(vals, t, _randn(vals.shape, gen, vals), schedule).x_t


def _filling_loop(x, ind, vals, models, schedule, gen, step=None):
    state = LatentState(x, schedule.T)
    while state.t > 0:
        t = state.t
        if step is None:
            _, x_u = unguided_draw(state.x, t, models.denoiser, schedule, gen)
        else:
            x_u = step(state).x
        x_k = _known_at(vals, t - 1, schedule, gen)
        state = LatentState(_check_finite(torch.where(ind, x_k, x_u), t), t - 1)
    # exact restore of the known rows (q_sample at t = 0 is already the identity)
    return torch.where(ind, vals, state.x)


def sample_filling(masks, models, schedule: NoiseSchedule, gen, n: int | None = None) -> torch.Tensor:
    """Complete partial sequences. ``masks`` is one :class:`FrameMask` (replicated
    ``n`` times) or a list of masks sharing one length."""
    models = _as_models(models)
    n = n or (1 if isinstance(masks, FrameMask) else len(masks))
    F, ind, vals = _stack_masks(masks, n)
    _check_length(models, F)
    x = torch.where(ind, _known_at(vals, schedule.T, schedule, gen), _randn(vals.shape, gen, vals))
    return _filling_loop(x, ind, vals, models, schedule, gen)


def sample_geometry_adaptive(neutral: np.ndarray, F: int, end: str, models: Models, schedule: NoiseSchedule,
                             config: GuidanceConfig, gen, y=None, n: int = 1) -> torch.Tensor:
    """Generate a sequence that starts (``end="first"``) or finishes (``end="last"``)
    at the given neutral frame, optionally guided towards label ``y``."""
    if end not in ("first", "last"):
        raise InvalidRangeError(f"end must be 'first' or 'last', got {end!r}")
    neutral = np.asarray(neutral)
    if neutral.ndim != 2 or neutral.shape[1] != 3:
        raise ShapeMismatchError(f"neutral frame must be (N, 3), got {neutral.shape}")
    known = [0] if end == "first" else [F - 1]
    mask = FrameMask(F=F, known=np.array(known), known_frames=neutral[None])
    _, ind, vals = _stack_masks(mask, n)
    _check_length(models, F)
    step = None
    if y is not None:
        _require_trained(models.classifier, "classifier")

        def step(state):
            return guided_step_label(state, y, models, schedule, config, gen)

    x0 = None
    for it in range(config.harmonization_iters):
        if it == 0:
            x = torch.where(ind, _known_at(vals, schedule.T, schedule, gen), _randn(vals.shape, gen, vals))
        else:
            x = q_sample(x0, schedule.T, _randn(x0.shape, gen, x0), schedule).x_t
        x0 = _filling_loop(x, ind, vals, models, schedule, gen, step)
    return x0


def enforced_end(seq_type: str) -> str:
    """The frame that holds the neutral face: the first for N2E, the last for E2N."""
    return "first" if seq_type == N2E else "last"


def boundary_discontinuity(x, end: str) -> float:
    """Mean landmark distance between the enforced frame and its neighbour, averaged over the batch."""
    x = torch.as_tensor(x)
    if x.dim() == 3:
        x = x[None]
    a, b = (x[:, 0], x[:, 1]) if end == "first" else (x[:, -1], x[:, -2])
    return float((a - b).norm(dim=-1).mean())
