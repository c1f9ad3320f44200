"""Bidirectional-transformer noise approximator ε_θ(x_t, t).

The transformer input for frame ``f`` is the sum of three embeddings: a
temporal embedding of the diffusion step, a positional encoding of the frame
index and a linear feature embedding of the flattened landmark frame.
Sequences of any length up to ``max_len`` are accepted; mixed-length batches
are padded and the padding is masked out of attention and of the loss.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import DivergenceError, LengthExceededError, ShapeMismatchError
from .schedule import NoiseSchedule, q_sample, simple_loss

log = logging.getLogger(__name__)


@dataclass
class DenoiserConfig:
    layers: int = 6
    heads: int = 8
    model_dim: int = 256
    feedforward_dim: int = 1024
    dropout: float = 0.1
    max_len: int = 64
    n_landmarks: int = 68
    skip_radius: int = 2

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.layers < 1 or self.max_len < 1:
            raise ValueError("layers and max_len must be positive")
        if self.skip_radius < 0:
            raise ValueError(f"skip_radius must be >= 0, got {self.skip_radius}")

    @property
    def n_features(self) -> int:
        return self.n_landmarks * 3

    def half_width(self) -> "DenoiserConfig":
        """Same depth, half the width; used for the guidance networks."""
        heads = max(1, self.heads // 2)
        dim = max(heads, self.model_dim // 2)
        dim -= dim % heads
        return DenoiserConfig(
            layers=self.layers, heads=heads, model_dim=dim,
            feedforward_dim=max(1, self.feedforward_dim // 2), dropout=self.dropout,
            max_len=self.max_len, n_landmarks=self.n_landmarks, skip_radius=self.skip_radius,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_encoding(pos: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos encoding of (possibly fractional) positions, shape (..., dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = pos.to(torch.float64)[..., None] * freqs
    enc = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        enc = torch.cat([enc, torch.zeros_like(enc[..., :1])], dim=-1)
    return enc


class BiTBackbone(nn.Module):
    """Embeddings plus a bidirectional transformer encoder.

    With ``cls_token=True`` a learnable token is prepended; its output row is
    the sequence summary used by the guidance heads.
    """

    def __init__(self, config: DenoiserConfig, cls_token: bool = False):
        super().__init__()
        self.config = config
        d = config.model_dim
        self.feature_embed = nn.Linear(config.n_features, d)
        self.time_embed = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        frames = torch.arange(1, config.max_len + 1)
        self.register_buffer("pos_table", sinusoidal_encoding(frames, d).float(), persistent=False)
        self.cls = nn.Parameter(torch.randn(d) * 0.02) if cls_token else None
        layer = nn.TransformerEncoderLayer(
            d, config.heads, config.feedforward_dim, config.dropout,
            activation="gelu", batch_first=True, norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, config.layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(d)

    def _flatten(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 4:
            x = x.reshape(x.shape[0], x.shape[1], -1)
        if x.dim() != 3 or x.shape[-1] != self.config.n_features:
            raise ShapeMismatchError(
                f"expected (B, F, {self.config.n_landmarks}, 3) or (B, F, {self.config.n_features}), "
                f"got {tuple(x.shape)}"
            )
        if x.shape[1] > self.config.max_len:
            raise LengthExceededError(f"sequence length {x.shape[1]} exceeds max_len {self.config.max_len}")
        return x

    def temporal(self, t, batch: int, like: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, device=like.device)
        if t.dim() == 0:
            t = t.expand(batch)
        enc = sinusoidal_encoding(t, self.config.model_dim).to(like.dtype)
        return self.time_embed(enc)

    def embed(self, x: torch.Tensor, t) -> torch.Tensor:
        """TE(t) + PE(f) + FE(x[f]) for every frame, shape (B, F, model_dim)."""
        x = self._flatten(x)
        B, F, _ = x.shape
        te = self.temporal(t, B, x)[:, None, :]
        pe = self.pos_table[:F].to(x.dtype)[None]
        return te + pe + self.feature_embed(x)

    def forward(self, x: torch.Tensor, t, mask: torch.Tensor | None = None) -> torch.Tensor:
        """Encoded tokens; ``mask`` is (B, F) with True on valid frames."""
        h = self.embed(x, t)
        pad = None if mask is None else ~mask.bool()
        if self.cls is not None:
            te = self.temporal(t, h.shape[0], h)
            cls = (self.cls.to(h.dtype) + te)[:, None, :]
            h = torch.cat([cls, h], dim=1)
            if pad is not None:
                pad = torch.cat([torch.zeros_like(pad[:, :1]), pad], dim=1)
        h = self.encoder(h, src_key_padding_mask=pad)
        return self.norm(h)


class SequenceDenoiser(nn.Module):
    """ε_θ: maps (x_t, t) to a noise estimate of the same shape as x_t."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        self.backbone = BiTBackbone(config)
        self.out = nn.Linear(config.model_dim, config.n_features)
        # per-coordinate, time-dependent temporal filter on x_t over frames
        # f - r .. f + r. A token narrower than the frame (model_dim < 3N) cannot
        # carry every coordinate, so without it eps ~ x_t at large t and the
        # per-coordinate temporal high-pass needed at small t are out of reach
        self.taps = 2 * config.skip_radius + 1
        self.skip_gain = nn.Linear(config.model_dim, self.taps * config.n_features)
        # untrained model predicts zero noise
        for layer in (self.out, self.skip_gain):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def embed_inputs(self, x_t: torch.Tensor, t) -> torch.Tensor:
        return self.backbone.embed(x_t, t)

    def neighbours(self, flat: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        """(B, F, taps, D) frames f + k for k in -r..r, clamped to each sequence's valid frames."""
        B, F, _ = flat.shape
        r = self.config.skip_radius
        last = torch.full((B,), F - 1, device=flat.device) if mask is None else mask.long().sum(1) - 1
        idx = torch.arange(F, device=flat.device)[:, None] + torch.arange(-r, r + 1, device=flat.device)
        idx = torch.minimum(idx.clamp(min=0)[None], last.clamp(min=0)[:, None, None])
        return flat[torch.arange(B, device=flat.device)[:, None, None], idx]

    def forward(self, x_t: torch.Tensor, t, mask: torch.Tensor | None = None) -> torch.Tensor:
        shape = x_t.shape
        h = self.backbone(x_t, t, mask)
        flat = self.backbone._flatten(x_t)
        B, _, D = flat.shape
        gain = self.skip_gain(self.backbone.temporal(t, B, flat)).reshape(B, 1, self.taps, D)
        return (self.out(h) + (gain * self.neighbours(flat, mask)).sum(2)).reshape(shape)

    def predict_noise(self, x_t: torch.Tensor, t, mask: torch.Tensor | None = None) -> torch.Tensor:
        """Accepts a single (F, N, 3) sequence or a batch (B, F, N, 3)."""
        if x_t.dim() == 3:
            return self.forward(x_t[None], t, None if mask is None else mask[None])[0]
        return self.forward(x_t, t, mask)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainSettings:
    steps: int = 200_000
    batch_size: int = 256
    lr: float = 1e-4
    seed: int = 0
    grad_clip: float | None = 1.0
    log_every: int = 0


@dataclass
class TrainResult:
    model: nn.Module
    losses: list[float] = field(default_factory=list)


def pad_batch(seqs: list[np.ndarray], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack (F_i, N, 3) arrays into a zero-padded (B, F_max, N, 3) tensor and a (B, F_max) validity mask."""
    F = max(s.shape[0] for s in seqs)
    out = torch.zeros((len(seqs), F) + tuple(seqs[0].shape[1:]), dtype=dtype)
    mask = torch.zeros((len(seqs), F), dtype=torch.bool)
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = torch.as_tensor(s, dtype=dtype)
        mask[i, : s.shape[0]] = True
    return out, mask


def per_item_loss(model, x0, t, eps, schedule: NoiseSchedule, mask=None) -> torch.Tensor:
    """Simplified objective per batch item, padding excluded."""
    x_t = q_sample(x0, t, eps, schedule).x_t
    eps_hat = model(x_t, t, mask)
    sq = ((eps - eps_hat) ** 2).flatten(2).mean(-1)  # (B, F)
    if mask is None:
        return sq.mean(-1)
    m = mask.to(sq.dtype)
    return (sq * m).sum(-1) / m.sum(-1)


def smoothed(losses, window: int = 50) -> tuple[float, float]:
    """Mean of the first and of the last ``window`` entries of a loss trace."""
    w = max(1, min(window, len(losses) // 2 or 1))
    return float(np.mean(losses[:w])), float(np.mean(losses[-w:]))


def train_denoiser(sequences, schedule: NoiseSchedule, config: DenoiserConfig,
                   settings: TrainSettings, model: SequenceDenoiser | None = None) -> TrainResult:
    """Minimise the simplified ε-prediction loss on ``sequences``.

    ``sequences`` is a list of normalised (F, N, 3) arrays; lengths may differ.
    """
    if not len(sequences):
        raise ValueError("empty training corpus")
    longest = max(s.shape[0] for s in sequences)
    if longest > config.max_len:
        raise LengthExceededError(f"corpus contains length {longest} > max_len {config.max_len}")
    torch.manual_seed(settings.seed)
    model = model or SequenceDenoiser(config)
    model.train()
    rng = np.random.default_rng(settings.seed)
    gen = torch.Generator().manual_seed(settings.seed)
    opt = torch.optim.Adam(model.parameters(), lr=settings.lr)
    losses: list[float] = []
    for step in range(settings.steps):
        idx = rng.integers(0, len(sequences), settings.batch_size)
        x0, mask = pad_batch([sequences[i] for i in idx])
        t = torch.randint(1, schedule.T + 1, (len(idx),), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        x_t = q_sample(x0, t, eps, schedule).x_t
        eps_hat = model(x_t, t, mask)
        loss = simple_loss(eps, eps_hat, mask[:, :, None, None])
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if settings.grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), settings.grad_clip)
        opt.step()
        losses.append(loss.item())
        if settings.log_every and (step + 1) % settings.log_every == 0:
            log.info("denoiser step %d loss %.4f", step + 1, np.mean(losses[-settings.log_every:]))
    model.eval()
    return TrainResult(model=model, losses=losses)
