"""Landmark-sequence records, the on-disk sequence format, corpus handling,
normalisation and the procedural desk corpus.

Binary sequence file (little-endian, one sequence per file)::

    bytes 0..3   magic  b"4DFM"
    u32          format version (1)
    u32          F, number of frames
    u32          N, number of landmarks
    u32          label id (0xFFFFFFFF = unlabelled)
    u8           sequence type (0 = N2E, 1 = E2N, 255 = untyped)
    F*N*3 f32    coordinates, frame-major, then landmark, then xyz

A corpus is a directory of such files plus ``manifest.json`` carrying the
per-record subject id and source tag.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DegenerateLengthError, FormatError, UntypedRecordError

N_LANDMARKS = 68
N2E, E2N = "N2E", "E2N"
SEQ_TYPES = (N2E, E2N)
MAGIC = b"4DFM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIB")
_UNLABELLED = 0xFFFFFFFF
_UNTYPED = 255


@dataclass
class SequenceRecord:
    landmarks: np.ndarray  # (F, N, 3) float32, millimetres
    label: int | None = None
    seq_type: str | None = None
    subject: str = ""
    source: str = ""

    def __post_init__(self):
        self.landmarks = np.asarray(self.landmarks, dtype=np.float32)
        if self.landmarks.ndim != 3 or self.landmarks.shape[2] != 3:
            raise FormatError(f"landmarks must be (F, N, 3), got {self.landmarks.shape}")
        if self.landmarks.shape[0] < 2:
            raise DegenerateLengthError(f"a sequence needs at least 2 frames, got {self.landmarks.shape[0]}")
        if not np.isfinite(self.landmarks).all():
            raise FormatError("non-finite landmark coordinates")
        if self.seq_type is not None and self.seq_type not in SEQ_TYPES:
            raise FormatError(f"unknown sequence type {self.seq_type!r}")

    @property
    def n_frames(self) -> int:
        return self.landmarks.shape[0]

    @property
    def n_landmarks(self) -> int:
        return self.landmarks.shape[1]


def type_code(seq_type: str | None) -> int:
    return _UNTYPED if seq_type is None else SEQ_TYPES.index(seq_type)


# ---------------------------------------------------------------------------
# file I/O


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_sequence(record: SequenceRecord) -> bytes:
    F, N, _ = record.landmarks.shape
    label = _UNLABELLED if record.label is None else int(record.label)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, F, N, label, type_code(record.seq_type))
    return header + record.landmarks.astype("<f4").tobytes(order="C")


def decode_sequence(payload: bytes) -> SequenceRecord:
    if len(payload) < _HEADER.size:
        raise FormatError("truncated sequence header")
    magic, version, F, N, label, tcode = _HEADER.unpack_from(payload)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported sequence format version {version}")
    expected = _HEADER.size + F * N * 3 * 4
    if len(payload) != expected:
        raise FormatError(f"payload is {len(payload)} bytes, header implies {expected}")
    if tcode not in (0, 1, _UNTYPED):
        raise FormatError(f"bad sequence type code {tcode}")
    coords = np.frombuffer(payload, dtype="<f4", offset=_HEADER.size).reshape(F, N, 3)
    return SequenceRecord(
        landmarks=coords.astype(np.float32),
        label=None if label == _UNLABELLED else label,
        seq_type=None if tcode == _UNTYPED else SEQ_TYPES[tcode],
    )


def write_sequence(path, record: SequenceRecord) -> None:
    _atomic_write_bytes(Path(path), encode_sequence(record))


def read_sequence(path) -> SequenceRecord:
    return decode_sequence(Path(path).read_bytes())


MANIFEST = "manifest.json"


def write_corpus(directory, records: list[SequenceRecord]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, rec in enumerate(records):
        name = f"seq_{i:05d}.4dfm"
        write_sequence(directory / name, rec)
        entries.append({"file": name, "subject": rec.subject, "source": rec.source})
    manifest = {"format": "fex4d-corpus", "version": FORMAT_VERSION, "records": entries}
    _atomic_write_bytes(directory / MANIFEST, json.dumps(manifest, indent=1).encode())
    return directory


def read_corpus(directory) -> list[SequenceRecord]:
    directory = Path(directory)
    mpath = directory / MANIFEST
    if not mpath.exists():
        raise FormatError(f"{directory} has no {MANIFEST}")
    try:
        manifest = json.loads(mpath.read_text())
        entries = manifest["records"]
    except (ValueError, KeyError) as exc:
        raise FormatError(f"unreadable corpus manifest {mpath}: {exc}") from exc
    records = []
    for e in entries:
        rec = read_sequence(directory / e["file"])
        records.append(replace(rec, subject=e.get("subject", ""), source=e.get("source", "")))
    return records


# ---------------------------------------------------------------------------
# sequence utilities


def resample_sequence(record: SequenceRecord, target_F: int) -> SequenceRecord:
    """Linear interpolation of every coordinate onto ``target_F`` uniformly spaced frames."""
    F = record.n_frames
    if F < 2 or target_F < 2:
        raise DegenerateLengthError(f"cannot resample {F} frames to {target_F}")
    x = record.landmarks.astype(np.float64)
    if target_F == F:
        out = x
    else:
        pos = np.linspace(0.0, F - 1, target_F)
        i0 = np.minimum(np.floor(pos).astype(int), F - 2)
        w = (pos - i0)[:, None, None]
        out = (1.0 - w) * x[i0] + w * x[i0 + 1]
        out[0], out[-1] = x[0], x[-1]
    return replace(record, landmarks=out.astype(np.float32))


def extract_neutral(record: SequenceRecord) -> np.ndarray:
    """Neutral frame: the first frame of an N2E sequence, the last of an E2N one."""
    if record.seq_type is None:
        raise UntypedRecordError("sequence type is required to locate the neutral frame")
    return record.landmarks[0 if record.seq_type == N2E else -1].copy()


def split_sequence(frames: np.ndarray, target_len: int = 40, window: int = 5) -> list[tuple[int, int]]:
    """Cut a long capture into segments of roughly ``target_len`` frames.

    Cuts are placed at local minima of the smoothed landmark speed (rest
    points at neutral or apex), choosing the minimum nearest to
    ``start + target_len`` within ±25%; without such a minimum the cut falls
    at exactly ``target_len``. Trailing pieces shorter than half the target
    are dropped. Returns ``(start, stop)`` half-open frame ranges.
    """
    frames = np.asarray(frames, dtype=np.float64)
    n = len(frames)
    if n < 2:
        raise DegenerateLengthError("need at least 2 frames to split")
    speed = np.linalg.norm(np.diff(frames, axis=0), axis=-1).mean(-1)
    kernel = np.ones(window) / window
    smooth = np.convolve(speed, kernel, mode="same")
    minima = {i + 1 for i in range(1, len(smooth) - 1)
              if smooth[i] <= smooth[i - 1] and smooth[i] <= smooth[i + 1]}
    segments, start = [], 0
    lo_off, hi_off = int(round(0.75 * target_len)), int(round(1.25 * target_len))
    while n - start >= target_len // 2:
        if n - start <= hi_off:
            segments.append((start, n))
            break
        cands = [c for c in minima if start + lo_off <= c <= start + hi_off]
        cut = min(cands, key=lambda c: (abs(c - start - target_len), c)) if cands else start + target_len
        segments.append((start, cut))
        start = cut
    return segments


@dataclass
class CorpusStats:
    """Per-coordinate standardisation statistics from a training split."""

    mean: np.ndarray  # (N, 3)
    std: np.ndarray  # (N, 3)
    eps: float = 1e-6

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), self.eps)

    @classmethod
    def fit(cls, sequences, eps: float = 1e-6) -> "CorpusStats":
        allf = np.concatenate([np.asarray(s, dtype=np.float64) for s in sequences], axis=0)
        return cls(mean=allf.mean(0), std=allf.std(0), eps=eps)

    def normalize(self, x):
        x = np.asarray(x)
        out = (x.astype(np.float64) - self.mean) / self.std
        return out.astype(x.dtype if x.dtype.kind == "f" else np.float32)

    def denormalize(self, z):
        z = np.asarray(z)
        out = z.astype(np.float64) * self.std + self.mean
        return out.astype(z.dtype if z.dtype.kind == "f" else np.float32)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "eps": self.eps}

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusStats":
        return cls(mean=np.array(d["mean"]), std=np.array(d["std"]), eps=float(d.get("eps", 1e-6)))


def split_records(records, test_fraction: float = 0.2, seed: int = 0):
    """Stratified (per label) random train/test split."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    labels = sorted({r.label for r in records}, key=lambda v: (v is None, v))
    for lab in labels:
        idx = [i for i, r in enumerate(records) if r.label == lab]
        rng.shuffle(idx)
        k = int(round(len(idx) * test_fraction))
        test += [records[i] for i in idx[:k]]
        train += [records[i] for i in idx[k:]]
    return train, test


# ---------------------------------------------------------------------------
# procedural desk corpus


CLASS_NAMES = ("mouth open", "smile", "brow raise", "pucker", "eyes closed", "brow lower")


def class_name(c: int) -> str:
    return CLASS_NAMES[c] if c < len(CLASS_NAMES) else f"expression {c}"


def face_template() -> np.ndarray:
    """A 68-point frontal face layout (mm) following the usual landmark ordering:
    jaw 0-16, brows 17-26, nose 27-35, eyes 36-47, mouth 48-67."""
    pts = []
    for a in np.linspace(np.radians(200), np.radians(340), 17):  # jaw
        pts.append((70 * np.cos(a), 10 + 78 * np.sin(a)))
    for side in (-1, 1):  # brows, right then left in image order
        xs = np.linspace(-58, -14, 5) if side == -1 else np.linspace(14, 58, 5)
        for x in xs:
            pts.append((x, 38 + 7 * np.cos((abs(x) - 36) / 22 * np.pi / 2)))
    for y in np.linspace(28, 2, 4):  # nose bridge
        pts.append((0.0, y))
    for x in np.linspace(-14, 14, 5):  # nostrils
        pts.append((x, -6 - 3 * np.cos(x / 14 * np.pi / 2)))
    for cx in (-32.0, 32.0):  # eyes
        for a in np.radians([180, 120, 60, 0, 300, 240]):
            pts.append((cx + 12 * np.cos(a), 22 + 5 * np.sin(a)))
    for a in np.radians(np.linspace(180, -150, 12)):  # outer lip
        pts.append((25 * np.cos(a), -32 + 10 * np.sin(a)))
    for a in np.radians([180, 120, 90, 60, 0, 300, 270, 240]):  # inner lip
        pts.append((16 * np.cos(a), -32 + 4 * np.sin(a)))
    xy = np.array(pts)
    z = 60 - 0.008 * xy[:, 0] ** 2 - 0.003 * (xy[:, 1] + 5) ** 2
    z[27:31] += np.linspace(8, 22, 4)
    z[31:36] += 12
    out = np.column_stack([xy, z])
    assert out.shape == (N_LANDMARKS, 3)
    return out


_REGIONS = {
    "jaw": list(range(0, 17)),
    "brow": list(range(17, 27)),
    "nose": list(range(27, 36)),
    "eye": list(range(36, 48)),
    "mouth": list(range(48, 68)),
    "lower_mouth": [6, 7, 8, 9, 10, 55, 56, 57, 58, 59, 64, 65, 66, 67],
    "mouth_corners": [48, 54, 60, 64],
    "upper_lid": [37, 38, 43, 44],
}


def _class_basis(c: int, template: np.ndarray) -> np.ndarray:
    """Deterministic peak displacement (mm) of expression class ``c``."""
    d = np.zeros_like(template)
    if c == 0:  # mouth open
        for i in _REGIONS["lower_mouth"]:
            d[i] = (0, -12, -2)
        d[0:17, 1] -= 6 * np.exp(-((np.arange(17) - 8) / 4.0) ** 2)
    elif c == 1:  # smile
        for i, sx in ((48, -1), (60, -1), (54, 1), (64, 1)):
            d[i] = (6 * sx, 7, -1)
        d[[49, 59]] += (-2, 3, 0)
        d[[53, 55]] += (2, 3, 0)
        d[[1, 2, 3, 13, 14, 15], 0] += np.array([-2, -2, -1, 1, 2, 2])
    elif c == 2:  # brow raise
        d[17:27] = (0, 9, 1)
        d[[37, 38, 43, 44]] = (0, 2, 0)
    elif c == 3:  # pucker
        m = template[48:68]
        centre = m.mean(0)
        d[48:68] = (centre - m) * np.array([0.45, 0.3, 0.0]) + np.array([0, 0, 9])
    elif c == 4:  # eyes closed
        d[[37, 38, 43, 44]] = (0, -6, 0)
        d[[40, 41, 46, 47]] = (0, 2, 0)
        d[17:27, 1] -= 2
    elif c == 5:  # brow lower
        d[17:22] = (4, -6, 0)
        d[22:27] = (-4, -6, 0)
    else:
        rng = np.random.default_rng(7919 * (c + 1))
        centre = template[rng.integers(0, N_LANDMARKS)]
        w = np.exp(-np.sum((template - centre) ** 2, axis=1) / (2 * 18.0 ** 2))
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        d = 10.0 * w[:, None] * direction
    return d


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3 - 2 * u)


def _identity_field(rng, template) -> np.ndarray:
    """Smooth random per-subject shape offset (mm)."""
    off = np.zeros_like(template)
    for _ in range(8):
        k = rng.normal(0, 1 / 60.0, 3)
        phase = rng.uniform(0, 2 * np.pi)
        direction = rng.standard_normal(3)
        off += rng.normal(0, 1.5) * np.sin(template @ k + phase)[:, None] * direction
    return off


def make_synthetic_corpus(n_sequences: int, n_classes: int, seed: int = 0,
                          length: int | tuple[int, int] = 40, n_subjects: int = 12,
                          jitter: float = 0.15) -> list[SequenceRecord]:
    """Procedural stand-in for a captured 4D face corpus.

    Each subject has its own base geometry (template scaled anisotropically
    plus a smooth random offset). Each class has a fixed peak displacement,
    animated with a smoothstep ramp between random onset and apex frames and a
    random intensity, either neutral-to-expression (N2E) or the reverse
    (E2N). ``length`` is a fixed frame count or an inclusive (lo, hi) range.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    template = face_template()
    bases = [_class_basis(c, template) for c in range(n_classes)]
    subjects = []
    for s in range(n_subjects):
        scale = rng.normal(1.0, 0.06, 3)
        subjects.append((template * scale + _identity_field(rng, template), float(scale.mean())))
    labels = np.arange(n_sequences) % n_classes
    rng.shuffle(labels)
    per_class_count = np.zeros(n_classes, dtype=int)
    records = []
    for i in range(n_sequences):
        c = int(labels[i])
        seq_type = SEQ_TYPES[(per_class_count[c] + rng.integers(0, 2)) % 2]
        per_class_count[c] += 1
        F = length if isinstance(length, (int, np.integer)) else int(rng.integers(length[0], length[1] + 1))
        sid = int(rng.integers(0, n_subjects))
        base, scale = subjects[sid]
        onset = rng.uniform(0.05, 0.35) * (F - 1)
        apex = rng.uniform(0.6, 0.9) * (F - 1)
        amp = rng.uniform(0.7, 1.3)
        f = np.arange(F)
        ramp = amp * _smoothstep((f - onset) / (apex - onset))
        if seq_type == E2N:
            ramp = ramp[::-1]
        frames = base[None] + scale * ramp[:, None, None] * bases[c][None]
        frames = frames + rng.normal(0, jitter, frames.shape)
        records.append(SequenceRecord(frames.astype(np.float32), label=c, seq_type=seq_type,
                                      subject=f"synth{sid:03d}", source="synthetic"))
    return records


def peak_displacements(records) -> np.ndarray:
    """Per-record (N*3) displacement of the most expressive frame from the neutral one."""
    out = []
    for r in records:
        neutral = extract_neutral(r)
        disp = r.landmarks - neutral[None]
        k = np.argmax(np.linalg.norm(disp.reshape(len(disp), -1), axis=1))
        out.append(disp[k].reshape(-1))
    return np.array(out)
