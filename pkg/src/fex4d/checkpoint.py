"""Checkpoint files: a torch-serialised dict with a format tag, a kind, the
model configuration, weights, the noise schedule and corpus statistics."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import torch

from .data import CorpusStats
from .denoiser import DenoiserConfig, SequenceDenoiser
from .errors import FormatError, MissingCheckpointError
from .evaluation import IndependentClassifier
from .guidance import GuidanceClassifier, TextAlignmentHead
from .retarget import LandmarkRetargeter, RetargetConfig
from .schedule import NoiseSchedule

FORMAT = "fex4d-checkpoint"
VERSION = 1
KINDS = ("denoiser", "classifier", "text_head", "retarget", "ic")


def save_checkpoint(path, kind: str, model: torch.nn.Module, config: dict, schedule: NoiseSchedule | None = None,
                    stats: CorpusStats | None = None, meta: dict | None = None) -> Path:
    if kind not in KINDS:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": config,
        "state_dict": model.state_dict(),
        "schedule": schedule.to_dict() if schedule is not None else None,
        "stats": stats.to_dict() if stats is not None else None,
        "meta": meta or {},
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def load_checkpoint(path, kind: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpointError(f"checkpoint {path} not found")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise FormatError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise FormatError(f"{path}: not a {FORMAT} file")
    if payload.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if kind is not None and payload.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind} checkpoint, found {payload.get('kind')}")
    return payload


def schedule_of(payload: dict) -> NoiseSchedule:
    if payload.get("schedule") is None:
        raise FormatError("checkpoint carries no noise schedule")
    return NoiseSchedule.from_dict(payload["schedule"])


def stats_of(payload: dict) -> CorpusStats:
    if payload.get("stats") is None:
        raise FormatError("checkpoint carries no corpus statistics")
    return CorpusStats.from_dict(payload["stats"])


def build_model(payload: dict) -> torch.nn.Module:
    """Instantiate the network stored in a loaded checkpoint, in eval mode."""
    kind, cfg = payload["kind"], payload["config"]
    if kind == "denoiser":
        model = SequenceDenoiser(DenoiserConfig(**cfg["model"]))
    elif kind == "classifier":
        model = GuidanceClassifier(DenoiserConfig(**cfg["model"]), cfg["n_classes"], cfg["type"])
    elif kind == "text_head":
        model = TextAlignmentHead(DenoiserConfig(**cfg["model"]), cfg.get("out_dim", 512))
    elif kind == "retarget":
        rc = dict(cfg["model"])
        rc["channels"] = tuple(rc["channels"])
        model = LandmarkRetargeter(RetargetConfig(**rc), landmark_idx=payload["state_dict"]["landmark_idx"].numpy())
    elif kind == "ic":
        model = IndependentClassifier(cfg["n_classes"], cfg.get("n_landmarks", 68), cfg["hidden"], cfg.get("type", "I"))
    else:
        raise FormatError(f"unknown checkpoint kind {kind!r}")
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise FormatError(f"checkpoint weights do not match its configuration: {exc}") from exc
    model.eval()
    if hasattr(model, "trained"):
        model.trained = True
    return model
