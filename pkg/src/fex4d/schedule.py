"""Noise schedule and closed-form forward/reverse Gaussian algebra.

Steps are numbered ``t = 1..T`` as in the usual DDPM notation and stored in
0-indexed arrays, so ``beta[t - 1]`` is the variance increment of step ``t``.
``t = 0`` denotes clean data (``alpha_bar = 1``).

All functions accept either numpy arrays or torch tensors; the schedule
itself is always held in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidRangeError, ShapeMismatchError

PAPER_T = 2000
PAPER_BETA_START = 1e-4
PAPER_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "sigma"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    @property
    def beta_start(self) -> float:
        return float(self.beta[0])

    @property
    def beta_end(self) -> float:
        return float(self.beta[-1])

    def alpha_bar_at(self, t: int) -> float:
        """ᾱ for step ``t`` with the convention ᾱ_0 = 1."""
        if t == 0:
            return 1.0
        _check_step(self, t)
        return float(self.alpha_bar[t - 1])

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return make_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))


@dataclass
class LatentState:
    """A noisy sequence batch together with its step index."""

    x: torch.Tensor
    t: int

    def __post_init__(self):
        if self.t < 0:
            raise InvalidRangeError(f"step index must be >= 0, got {self.t}")


@dataclass
class ForwardSample:
    x_t: object
    eps: object


def make_schedule(T: int, beta_start: float = PAPER_BETA_START, beta_end: float = PAPER_BETA_END) -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise InvalidRangeError(f"T must be an integer >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidRangeError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    T = int(T)
    idx = np.arange(T, dtype=np.float64)
    beta = beta_start + (idx / (T - 1)) * (beta_end - beta_start)
    beta[-1] = beta_end
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def scaled_schedule(T: int, reference_T: int = PAPER_T,
                    beta_start: float = PAPER_BETA_START, beta_end: float = PAPER_BETA_END) -> NoiseSchedule:
    """Linear schedule for a shorter chain with the same total noise budget.

    Multiplying both endpoints by ``reference_T / T`` keeps ``sum(beta)`` (and
    hence ᾱ_T) close to that of the reference chain.
    """
    k = reference_T / T
    return make_schedule(T, beta_start * k, min(beta_end * k, 0.999))


def _check_step(schedule: NoiseSchedule, t, lo: int = 1):
    if isinstance(t, (int, np.integer)):
        if not lo <= t <= schedule.T:
            raise InvalidRangeError(f"step {t} outside [{lo}, {schedule.T}]")
        return
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if arr.size and (arr.min() < lo or arr.max() > schedule.T):
        raise InvalidRangeError(f"steps outside [{lo}, {schedule.T}]")


def _coef(values: np.ndarray, t, like):
    """Gather ``values[t]`` from a table padded by :func:`_padded` and shape it
    to broadcast against ``like``. ``t`` is an int or a per-batch vector
    aligned with the leading axis of ``like``.
    """
    if isinstance(t, (int, np.integer)):
        c = float(values[t])
        return c
    if isinstance(like, torch.Tensor):
        tt = torch.as_tensor(t, device=like.device).long()
        c = torch.as_tensor(values, dtype=like.dtype, device=like.device)[tt]
        return c.reshape(-1, *([1] * (like.dim() - 1)))
    tt = np.asarray(t).astype(np.int64)
    return values[tt].reshape(-1, *([1] * (np.ndim(like) - 1)))


def _padded(values: np.ndarray, clean_value: float) -> np.ndarray:
    # index 0 is the t = 0 (clean) limit, index t is step t
    return np.concatenate([[clean_value], values])


def _shape(x):
    return tuple(x.shape)


def q_sample(x0, t, eps, schedule: NoiseSchedule) -> ForwardSample:
    """Draw x_t from q(x_t | x_0) using the supplied standard-normal ``eps``.

    ``t = 0`` is accepted and returns ``x0`` unchanged (ᾱ_0 = 1).
    """
    if _shape(x0) != _shape(eps):
        raise ShapeMismatchError(f"x0 {_shape(x0)} vs eps {_shape(eps)}")
    _check_step(schedule, t, lo=0)
    ab = _padded(schedule.alpha_bar, 1.0)
    a = _coef(np.sqrt(ab), t, x0)
    b = _coef(np.sqrt(1.0 - ab), t, x0)
    return ForwardSample(x_t=a * x0 + b * eps, eps=eps)


def _randn_like(x, rng):
    if isinstance(x, torch.Tensor):
        return torch.randn(x.shape, generator=rng, dtype=x.dtype, device=x.device)
    return rng.standard_normal(np.shape(x))


def q_step(x_prev, t, schedule: NoiseSchedule, rng):
    """One forward transition x_{t-1} -> x_t, a draw from N(√(1-β_t) x_{t-1}, β_t I)."""
    _check_step(schedule, t)
    beta = _padded(schedule.beta, 0.0)
    z = _randn_like(x_prev, rng)
    return _coef(np.sqrt(1.0 - beta), t, x_prev) * x_prev + _coef(np.sqrt(beta), t, x_prev) * z


def posterior_mean(x_t, eps_hat, t, schedule: NoiseSchedule):
    """Mean of p(x_{t-1} | x_t) given a noise estimate:
    (x_t - β_t / √(1-ᾱ_t) · ε̂) / √α_t.
    """
    if _shape(x_t) != _shape(eps_hat):
        raise ShapeMismatchError(f"x_t {_shape(x_t)} vs eps_hat {_shape(eps_hat)}")
    _check_step(schedule, t)
    beta = _padded(schedule.beta, 0.0)
    alpha = _padded(schedule.alpha, 1.0)
    ab = _padded(schedule.alpha_bar, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = beta / np.sqrt(1.0 - ab)
    k[0] = 0.0
    inv_sqrt_alpha = 1.0 / np.sqrt(alpha)
    return _coef(inv_sqrt_alpha, t, x_t) * (x_t - _coef(k, t, x_t) * eps_hat)


def simple_loss(eps, eps_hat, mask=None):
    """Mean squared error between true and predicted noise.

    ``mask`` (optional) selects valid entries, e.g. non-padded frames of a
    mixed-length batch; a (B, F, 1, 1) frame mask works for (B, F, N, 3) data.
    """
    if _shape(eps) != _shape(eps_hat):
        raise ShapeMismatchError(f"eps {_shape(eps)} vs eps_hat {_shape(eps_hat)}")
    sq = (eps - eps_hat) ** 2
    if mask is None:
        return sq.mean()
    if isinstance(sq, torch.Tensor):
        m = mask.to(sq.dtype).expand_as(sq)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=sq.dtype), sq.shape)
    return (sq * m).sum() / m.sum()
