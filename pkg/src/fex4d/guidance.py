"""Networks that steer the reverse process.

* :class:`GuidanceClassifier` predicts log p(y | x_t, t) from a noisy sequence.
  Type ``"I"`` predicts the expression only; type ``"S"`` predicts the pair
  (expression, sequence type) encoded as ``2 * expression + type_code``.
* :class:`TextAlignmentHead` maps (x_t, t) to a 512-d vector trained to align,
  by cosine similarity, with the embedding of the sequence's text.
* Text embeddings come from a :class:`TextEmbeddingProvider`. The repository
  ships a deterministic hash-seeded stub, a reader for the embedding exchange
  file, and an adapter that runs an external encoder as a subprocess.

Embedding exchange file (little-endian)::

    bytes 0..3  magic b"4DTE"
    u32         version (1)
    u32         record count
    u32         dimension (512)
    records:    u32 byte length, UTF-8 prompt, dimension * f32
"""

from __future__ import annotations

import hashlib
import logging
import struct
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import N2E, SEQ_TYPES
from .denoiser import BiTBackbone, DenoiserConfig, TrainSettings, pad_batch
from .errors import (DivergenceError, FormatError, LengthExceededError, MissingClassError,
                     ProviderError, UntrainedModelError)
from .schedule import NoiseSchedule, q_sample

log = logging.getLogger(__name__)

TEXT_DIM = 512
CLASSIFIER_TYPES = ("I", "S")


def type_s_label(expression: int, seq_type: str) -> int:
    return 2 * int(expression) + SEQ_TYPES.index(seq_type)


def split_type_s_label(label: int) -> tuple[int, str]:
    return label // 2, SEQ_TYPES[label % 2]


def labels_for(records, kind: str) -> list[int]:
    if kind == "I":
        return [int(r.label) for r in records]
    return [type_s_label(r.label, r.seq_type) for r in records]


class GuidanceClassifier(nn.Module):
    """BiT with a prepended classification token and a softmax head."""

    def __init__(self, config: DenoiserConfig, n_classes: int, kind: str = "I"):
        super().__init__()
        if kind not in CLASSIFIER_TYPES:
            raise ValueError(f"classifier type must be 'I' or 'S', got {kind!r}")
        self.config = config
        self.n_classes = n_classes
        self.kind = kind
        self.backbone = BiTBackbone(config, cls_token=True)
        self.head = nn.Linear(config.model_dim, n_classes)
        self.trained = False

    def forward(self, x_t, t, mask=None) -> torch.Tensor:
        """Log-probabilities, shape (B, K)."""
        h = self.backbone(x_t, t, mask)[:, 0]
        return F.log_softmax(self.head(h), dim=-1)

    def classify_noisy(self, x_t, t, mask=None) -> torch.Tensor:
        if not self.trained:
            raise UntrainedModelError("guidance classifier has not been trained")
        single = x_t.dim() == 3
        out = self.forward(x_t[None] if single else x_t, t, mask)
        return out[0] if single else out

    def log_prob(self, x_t, t, y, mask=None) -> torch.Tensor:
        """log p(y | x_t, t) per batch item; ``y`` is an int or a (B,) tensor."""
        lp = self.classify_noisy(x_t, t, mask)
        y = torch.as_tensor(y, device=lp.device).long()
        if y.dim() == 0:
            y = y.expand(lp.shape[0])
        return lp.gather(1, y[:, None])[:, 0]


class TextAlignmentHead(nn.Module):
    """BiT whose classification-token output is a 512-d vector (no softmax)."""

    def __init__(self, config: DenoiserConfig, out_dim: int = TEXT_DIM):
        super().__init__()
        self.config = config
        self.out_dim = out_dim
        self.backbone = BiTBackbone(config, cls_token=True)
        self.head = nn.Linear(config.model_dim, out_dim)
        self.trained = False

    def forward(self, x_t, t, mask=None) -> torch.Tensor:
        return self.head(self.backbone(x_t, t, mask)[:, 0])

    def align_text(self, x_t, t, mask=None) -> torch.Tensor:
        if not self.trained:
            raise UntrainedModelError("text alignment head has not been trained")
        single = x_t.dim() == 3
        out = self.forward(x_t[None] if single else x_t, t, mask)
        return out[0] if single else out

    def cosine(self, x_t, t, target: torch.Tensor, mask=None) -> torch.Tensor:
        """cos(head(x_t, t), target) per batch item; ``target`` is (512,) or (B, 512)."""
        v = self.align_text(x_t, t, mask)
        target = torch.as_tensor(target, dtype=v.dtype, device=v.device)
        return F.cosine_similarity(v, target.expand_as(v), dim=-1)


# ---------------------------------------------------------------------------
# training


def _noisy_batches(sequences, targets, schedule, settings):
    rng = np.random.default_rng(settings.seed)
    gen = torch.Generator().manual_seed(settings.seed)
    for _ in range(settings.steps):
        idx = rng.integers(0, len(sequences), settings.batch_size)
        x0, mask = pad_batch([sequences[i] for i in idx])
        # t uniform over 1..T, as at guidance time every step is visited
        t = torch.randint(1, schedule.T + 1, (len(idx),), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        x_t = q_sample(x0, t, eps, schedule).x_t
        yield x_t, t, mask, targets[torch.as_tensor(idx)]


def _fit(model, loss_fn, batches, settings, what: str) -> list[float]:
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=settings.lr)
    losses = []
    for step, (x_t, t, mask, target) in enumerate(batches):
        loss = loss_fn(model(x_t, t, mask), target)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite {what} loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if settings.grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), settings.grad_clip)
        opt.step()
        losses.append(loss.item())
        if settings.log_every and (step + 1) % settings.log_every == 0:
            log.info("%s step %d loss %.4f", what, step + 1, np.mean(losses[-settings.log_every:]))
    model.eval()
    return losses


def _check_lengths(sequences, config):
    longest = max(s.shape[0] for s in sequences)
    if longest > config.max_len:
        raise LengthExceededError(f"corpus contains length {longest} > max_len {config.max_len}")


def train_guidance_classifier(sequences, labels, schedule: NoiseSchedule, config: DenoiserConfig,
                              settings: TrainSettings, kind: str = "I", n_classes: int | None = None):
    """Cross-entropy training on (x_t, t, y) with x_t drawn from q(x_t | x_0).

    Returns ``(classifier, losses)``. ``labels`` must already be in the label
    space of ``kind`` (see :func:`labels_for`).
    """
    labels = np.asarray(labels, dtype=np.int64)
    K = int(n_classes if n_classes is not None else labels.max() + 1)
    missing = sorted(set(range(K)) - set(labels.tolist()))
    if missing:
        raise MissingClassError(f"no training sequences for classes {missing}")
    _check_lengths(sequences, config)
    torch.manual_seed(settings.seed)
    model = GuidanceClassifier(config, K, kind)
    batches = _noisy_batches(sequences, torch.as_tensor(labels), schedule, settings)
    losses = _fit(model, F.nll_loss, batches, settings, "classifier")
    model.trained = True
    return model, losses


def cosine_alignment_loss(out: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return (1.0 - F.cosine_similarity(out, target, dim=-1)).mean()


def train_text_head(sequences, texts, provider: "TextEmbeddingProvider", schedule: NoiseSchedule,
                    config: DenoiserConfig, settings: TrainSettings):
    """Train a :class:`TextAlignmentHead` so that head(x_t, t) aligns with provider(text of x_0)."""
    _check_lengths(sequences, config)
    cache = {}
    for txt in texts:
        if txt not in cache:
            cache[txt] = provider(txt)
    targets = torch.as_tensor(np.stack([cache[t] for t in texts]), dtype=torch.float32)
    torch.manual_seed(settings.seed)
    model = TextAlignmentHead(config)
    batches = _noisy_batches(sequences, targets, schedule, settings)
    losses = _fit(model, cosine_alignment_loss, batches, settings, "text head")
    model.trained = True
    return model, losses


def describe(label_name: str, seq_type: str | None = None) -> str:
    """Prompt text for a sequence: the raw label, or an enriched sentence when typed."""
    if seq_type is None:
        return label_name
    if seq_type == N2E:
        return f"from the neutral face to {label_name}"
    return f"from {label_name} to the neutral face"


# ---------------------------------------------------------------------------
# text embedding providers


class TextEmbeddingProvider(Protocol):
    def __call__(self, prompt: str) -> np.ndarray: ...


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0:
        raise ProviderError("embedding has zero or non-finite norm")
    return (v / n).astype(np.float32)


def stub_text_embedding(prompt: str, seed: int = 0, dim: int = TEXT_DIM) -> np.ndarray:
    """Deterministic pseudo-random unit vector seeded by a hash of the prompt."""
    if not prompt:
        raise ProviderError("empty prompt")
    digest = hashlib.sha256(f"{seed}\x00{prompt}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return _unit(rng.standard_normal(dim))


@dataclass
class StubTextEmbedding:
    seed: int = 0
    dim: int = TEXT_DIM

    def __call__(self, prompt: str) -> np.ndarray:
        return stub_text_embedding(prompt, self.seed, self.dim)


_EMB_MAGIC = b"4DTE"
_EMB_HEADER = struct.Struct("<4sIII")


def write_embedding_file(path, embeddings: dict[str, np.ndarray]) -> None:
    dims = {np.asarray(v).size for v in embeddings.values()} or {TEXT_DIM}
    if len(dims) != 1:
        raise FormatError("all embeddings must share one dimension")
    dim = dims.pop()
    parts = [_EMB_HEADER.pack(_EMB_MAGIC, 1, len(embeddings), dim)]
    for prompt, vec in embeddings.items():
        raw = prompt.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(np.asarray(vec, dtype="<f4").reshape(dim).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_embedding_file(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < _EMB_HEADER.size:
        raise FormatError("truncated embedding file")
    magic, version, count, dim = _EMB_HEADER.unpack_from(buf)
    if magic != _EMB_MAGIC or version != 1:
        raise FormatError(f"not an embedding exchange file (magic {magic!r}, version {version})")
    off, out = _EMB_HEADER.size, {}
    for _ in range(count):
        if off + 4 > len(buf):
            raise FormatError("truncated embedding record")
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        prompt = buf[off:off + n].decode("utf-8")
        off += n
        end = off + 4 * dim
        if end > len(buf):
            raise FormatError("truncated embedding vector")
        out[prompt] = np.frombuffer(buf, dtype="<f4", count=dim, offset=off).astype(np.float32)
        off = end
    if off != len(buf):
        raise FormatError("trailing bytes in embedding file")
    return out


class FileTextEmbedding:
    """Provider backed by a pre-computed embedding exchange file."""

    def __init__(self, path):
        self.path = Path(path)
        self.table = read_embedding_file(self.path)

    def __call__(self, prompt: str) -> np.ndarray:
        if prompt not in self.table:
            raise ProviderError(f"prompt {prompt!r} not present in {self.path}")
        return _unit(self.table[prompt])


class CommandTextEmbedding:
    """Runs an external encoder out of process.

    The command is invoked as ``argv + [prompts_txt, out_file]``; it must read
    one UTF-8 prompt per line and write an embedding exchange file.
    """

    def __init__(self, argv: list[str], timeout: float = 300.0):
        self.argv = list(argv)
        self.timeout = timeout
        self._cache: dict[str, np.ndarray] = {}

    def prefetch(self, prompts) -> None:
        todo = [p for p in dict.fromkeys(prompts) if p not in self._cache]
        if not todo:
            return
        if any("\n" in p for p in todo):
            raise ProviderError("prompts must not contain newlines")
        with tempfile.TemporaryDirectory() as tmp:
            src, dst = Path(tmp) / "prompts.txt", Path(tmp) / "embeddings.bin"
            src.write_text("\n".join(todo) + "\n", encoding="utf-8")
            try:
                subprocess.run(self.argv + [str(src), str(dst)], check=True, timeout=self.timeout,
                               capture_output=True)
                table = read_embedding_file(dst)
            except (OSError, subprocess.SubprocessError, FormatError) as exc:
                raise ProviderError(f"external text encoder failed: {exc}") from exc
        for p in todo:
            if p not in table:
                raise ProviderError(f"external encoder returned no vector for {p!r}")
            self._cache[p] = _unit(table[p])

    def __call__(self, prompt: str) -> np.ndarray:
        self.prefetch([prompt])
        return self._cache[prompt]
