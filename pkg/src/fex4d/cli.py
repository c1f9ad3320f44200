"""Command-line interface.

Every command accepts ``--profile``, ``--config`` and repeated ``--set
section.key=value``, is deterministic given ``--seed``, and writes a
``run.json`` manifest (config hash, seed, version) next to its outputs.

Exit codes: 0 ok, 1 other error, 2 usage, 3 bad config, 4 missing
checkpoint, 5 bad file format, 6 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import build_model, load_checkpoint, save_checkpoint, schedule_of, stats_of
from .config import RunConfig, dump_config, load_config
from .data import (N2E, SEQ_TYPES, CorpusStats, SequenceRecord, class_name, extract_neutral,
                   make_synthetic_corpus, read_corpus, read_sequence, split_records, write_corpus)
from .denoiser import smoothed, train_denoiser
from .errors import ConfigError, Fex4dError, FormatError
from .evaluation import ICTrainSettings, evaluate_generation, train_ic, write_report
from .guidance import (CommandTextEmbedding, FileTextEmbedding, StubTextEmbedding, describe, labels_for,
                       split_type_s_label, train_guidance_classifier, train_text_head)
from .mesh import read_landmark_index, read_mesh, write_landmark_index, write_mesh
from .retarget import make_mesh_corpus, per_vertex_error, retarget_sequence, train_retargeter
from .sampler import (FrameMask, GuidanceConfig, Models, enforced_end, protocol_mask, sample_filling,
                      sample_geometry_adaptive, sample_label_control, sample_text_control, sample_unconditional)

log = logging.getLogger("fex4d")


def version_string() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(directory: Path, command: str, cfg: RunConfig, args, extra: dict | None = None) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    argv = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    doc = {"command": command, "config_hash": cfg.hash(), "seed": args.seed, "version": version_string(),
           "args": argv, **(extra or {})}
    path = directory / "run.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _config(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    return load_config(args.profile, args.config, overrides)


def _out_dir(path: Path) -> Path:
    return path if path.suffix == "" else path.parent


def _training_split(args, cfg: RunConfig):
    records = read_corpus(args.data)
    if not records:
        raise FormatError(f"corpus {args.data} is empty")
    return split_records(records, cfg.data.test_fraction, args.seed)


# ---------------------------------------------------------------------------
# commands


def cmd_make_synthetic(args, cfg: RunConfig):
    d = cfg.data
    n = args.n or d.n_sequences
    k = args.classes or d.n_classes
    records = make_synthetic_corpus(n, k, seed=args.seed, length=(d.length_min, d.length_max))
    write_corpus(args.out, records)
    write_manifest(args.out, "make-synthetic", cfg, args, {"n_sequences": n, "n_classes": k})
    print(f"wrote {n} sequences to {args.out}")


def cmd_train_diffusion(args, cfg: RunConfig):
    train, _ = _training_split(args, cfg)
    stats = CorpusStats.fit([r.landmarks for r in train])
    seqs = [stats.normalize(r.landmarks) for r in train]
    schedule = cfg.schedule.build()
    res = train_denoiser(seqs, schedule, cfg.denoiser, cfg.train.settings(args.seed))
    first, last = smoothed(res.losses)
    save_checkpoint(args.out, "denoiser", res.model, {"model": cfg.denoiser.to_dict()}, schedule, stats,
                    {"loss_first": first, "loss_last": last, "config_hash": cfg.hash()})
    write_manifest(_out_dir(args.out), "train-diffusion", cfg, args, {"loss_first": first, "loss_last": last})
    print(f"loss {first:.4f} -> {last:.4f}; saved {args.out}")


def _denoiser_context(path):
    payload = load_checkpoint(path, "denoiser")
    return payload, schedule_of(payload), stats_of(payload)


def cmd_train_classifier(args, cfg: RunConfig):
    train, _ = _training_split(args, cfg)
    _, schedule, stats = _denoiser_context(args.denoiser)
    seqs = [stats.normalize(r.landmarks) for r in train]
    labels = labels_for(train, args.type)
    n_classes = max(r.label for r in train) + 1
    K = n_classes if args.type == "I" else 2 * n_classes
    model_cfg = cfg.guide_config(cfg.classifier)
    clf, losses = train_guidance_classifier(seqs, labels, schedule, model_cfg,
                                            cfg.classifier.settings(args.seed), args.type, K)
    save_checkpoint(args.out, "classifier", clf,
                    {"model": model_cfg.to_dict(), "n_classes": K, "type": args.type}, schedule, stats)
    write_manifest(_out_dir(args.out), "train-classifier", cfg, args)
    print(f"classifier type {args.type}, {K} classes; saved {args.out}")


def _provider(args):
    if getattr(args, "embeddings", None):
        return FileTextEmbedding(args.embeddings)
    if getattr(args, "text_encoder", None):
        return CommandTextEmbedding(args.text_encoder.split())
    return StubTextEmbedding()


def _prompt(record: SequenceRecord, typed: bool) -> str:
    return describe(class_name(record.label), record.seq_type if typed else None)


def cmd_train_text_head(args, cfg: RunConfig):
    train, _ = _training_split(args, cfg)
    _, schedule, stats = _denoiser_context(args.denoiser)
    seqs = [stats.normalize(r.landmarks) for r in train]
    texts = [_prompt(r, args.typed_prompts) for r in train]
    provider = _provider(args)
    if isinstance(provider, CommandTextEmbedding):
        provider.prefetch(texts)
    model_cfg = cfg.guide_config(cfg.text_head)
    head, _ = train_text_head(seqs, texts, provider, schedule, model_cfg, cfg.text_head.settings(args.seed))
    save_checkpoint(args.out, "text_head", head, {"model": model_cfg.to_dict(), "out_dim": head.out_dim},
                    schedule, stats, {"prompts": sorted(set(texts))})
    write_manifest(_out_dir(args.out), "train-text-head", cfg, args)
    print(f"text head trained on {len(set(texts))} prompts; saved {args.out}")


def cmd_train_retarget(args, cfg: RunConfig):
    corpus = make_mesh_corpus(args.identities, args.per_identity, seed=args.seed)
    n_train = max(1, int(round(args.identities * 0.8)))
    train, test = corpus.subset(range(n_train)), corpus.subset(range(n_train, args.identities))
    model, losses = train_retargeter(train, cfg.retarget.model_config(), cfg.retarget.settings(args.seed))
    err = per_vertex_error(model, test) if len(test.identity) else np.zeros(1)
    meta = {"heldout_error_mean": float(err.mean()), "heldout_error_std": float(err.std())}
    save_checkpoint(args.out, "retarget", model, {"model": model.config.to_dict()}, meta=meta)
    out = _out_dir(args.out)
    write_mesh(out / "template.obj", corpus.neutrals[-1], corpus.faces)
    write_landmark_index(out / "landmarks.txt", corpus.landmark_idx)
    write_manifest(out, "train-retarget", cfg, args, meta)
    print(f"held-out per-vertex error {err.mean():.4f} +- {err.std():.4f} mm; saved {args.out}")


def cmd_train_ic(args, cfg: RunConfig):
    train, test = _training_split(args, cfg)
    labels = labels_for(train, args.type)
    n_classes = max(r.label for r in train) + 1
    K = n_classes if args.type == "I" else 2 * n_classes
    ic_cfg = cfg.ic
    settings = ICTrainSettings(ic_cfg.epochs, ic_cfg.batch_size, ic_cfg.lr, ic_cfg.val_fraction,
                               ic_cfg.patience, args.seed)
    ic, val_acc = train_ic([r.landmarks for r in train], labels, settings, K, args.type, ic_cfg.hidden)
    rep = evaluate_generation([r.landmarks for r in test], labels_for(test, args.type),
                              [r.landmarks for r in train], ic)
    save_checkpoint(args.out, "ic", ic, {"n_classes": K, "hidden": ic_cfg.hidden, "type": args.type},
                    meta={"val_accuracy": val_acc, "test_accuracy": rep.accuracy})
    write_manifest(_out_dir(args.out), "train-ic", cfg, args, {"test_accuracy": rep.accuracy})
    print(f"IC held-out accuracy {rep.accuracy:.3f}; saved {args.out}")


def _guidance(args, cfg: RunConfig) -> GuidanceConfig:
    g = cfg.guidance
    return GuidanceConfig(
        lam=args.lam if args.lam is not None else g.lam,
        opt_steps=args.opt_steps if args.opt_steps is not None else g.opt_steps,
        opt_lr=args.opt_lr if args.opt_lr is not None else g.opt_lr,
        harmonization_iters=args.iters if args.iters is not None else g.harmonization_iters,
    )


def _guide_model(path, kind):
    if path is None:
        raise ConfigError(f"this sampling mode needs --{kind.replace('_', '-')}")
    return build_model(load_checkpoint(path, kind))


def cmd_sample(args, cfg: RunConfig):
    payload, schedule, stats = _denoiser_context(args.denoiser)
    models = Models(build_model(payload))
    gen = torch.Generator().manual_seed(args.seed)
    rng = np.random.default_rng(args.seed)
    guide = _guidance(args, cfg)
    n, F = args.n, args.length
    labels = [None] * n
    types = [None] * n
    known = None
    if args.fill:
        src = read_sequence(args.fill)
        mask = protocol_mask(stats.normalize(src.landmarks), args.protocol, rng)
        known = mask.known
        x = sample_filling(mask, models, schedule, gen, n=n)
        labels, types = [src.label] * n, [src.seq_type] * n
    elif args.geometry:
        src = read_sequence(args.geometry)
        neutral = stats.normalize(extract_neutral(src))
        y, seq_type = None, args.seq_type or src.seq_type or N2E
        if args.label is not None:
            models.classifier = _guide_model(args.classifier, "classifier")
            if models.classifier.kind == "S":
                y = 2 * args.label + SEQ_TYPES.index(seq_type)
            else:
                y = args.label
        end = enforced_end(seq_type)
        x = sample_geometry_adaptive(neutral, F, end, models, schedule, guide, gen, y=y, n=n)
        labels, types = [args.label] * n, [seq_type] * n
        known = np.array([0 if end == "first" else F - 1])
    elif args.text is not None:
        models.text_head = _guide_model(args.text_head, "text_head")
        x = sample_text_control(F, args.text, models, _provider(args), schedule, guide, gen, n=n)
    elif args.label is not None:
        models.classifier = _guide_model(args.classifier, "classifier")
        y = args.label
        if models.classifier.kind == "S":
            seq_type = args.seq_type or N2E
            y = 2 * args.label + SEQ_TYPES.index(seq_type)
            types = [seq_type] * n
        if not 0 <= y < models.classifier.n_classes:
            raise ConfigError(f"label {args.label} outside the classifier's label space")
        x = sample_label_control(F, y, models, schedule, guide, gen, n=n)
        labels = [args.label] * n
    else:
        x = sample_unconditional(F, models, schedule, gen, n=n)

    out = denormalized(x.numpy(), stats)
    if known is not None:  # keep given frames bit-exact in millimetres
        raw = read_sequence(args.fill or args.geometry)
        given = raw.landmarks[known] if args.fill else extract_neutral(raw)[None]
        out[:, known] = given
    records = [SequenceRecord(o, labels[i], types[i], source="generated") for i, o in enumerate(out)]
    write_corpus(args.out, records)
    extra = {"known_frames": None if known is None else known.tolist()}
    write_manifest(args.out, "sample", cfg, args, extra)
    print(f"wrote {n} sequences of length {out.shape[1]} to {args.out}")


def denormalized(x: np.ndarray, stats: CorpusStats) -> np.ndarray:
    return stats.denormalize(x.astype(np.float64)).astype(np.float32)


def cmd_retarget(args, cfg: RunConfig):
    model = build_model(load_checkpoint(args.model, "retarget"))
    verts, faces = read_mesh(args.mesh)
    rec = read_sequence(args.landmarks)
    neutral = extract_neutral(rec) if rec.seq_type is not None else rec.landmarks[0]
    states = retarget_sequence(model, verts, rec.landmarks, neutral)
    args.out.mkdir(parents=True, exist_ok=True)
    ext = args.format
    for f, st in enumerate(states):
        write_mesh(args.out / f"frame_{f:04d}.{ext}", st.M_f, faces)
    if args.landmark_index:
        read_landmark_index(args.landmark_index, len(verts))
    write_manifest(args.out, "retarget", cfg, args, {"frames": len(states)})
    print(f"wrote {len(states)} meshes to {args.out}")


def cmd_evaluate(args, cfg: RunConfig):
    payload = load_checkpoint(args.ic, "ic")
    ic = build_model(payload)
    gen = read_corpus(args.generated)
    ref = read_corpus(args.reference)
    if any(r.label is None for r in gen):
        raise FormatError("generated sequences must carry their intended labels")
    labels = labels_for(gen, ic.kind)
    rep = evaluate_generation([r.landmarks for r in gen], labels, [r.landmarks for r in ref], ic)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_report(args.out, {args.name: rep})
    write_manifest(_out_dir(args.out), "evaluate", cfg, args, rep.as_dict())
    print(f"acc={rep.accuracy:.4f} fid={rep.fid:.4f}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--profile", default="desk", help="configuration profile (desk or paper)")
    common.add_argument("--config", type=Path, help="key=value configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fex4d", description="Diffusion-based 4D facial expression toolkit")
    p.add_argument("--version", action="version", version=f"fex4d {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        return sp

    sp = add("make-synthetic", cmd_make_synthetic, "write a procedural landmark-sequence corpus")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--n", type=int)
    sp.add_argument("--classes", type=int)

    sp = add("train-diffusion", cmd_train_diffusion, "train the sequence denoiser")
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)

    for name, func, kind in (("train-classifier", cmd_train_classifier, "classifier"),
                             ("train-text-head", cmd_train_text_head, "text")):
        sp = add(name, func, f"train the noisy-data {kind} guidance network")
        sp.add_argument("--data", type=Path, required=True)
        sp.add_argument("--denoiser", type=Path, required=True, help="denoiser checkpoint (schedule and stats)")
        sp.add_argument("--out", type=Path, required=True)
        if kind == "classifier":
            sp.add_argument("--type", choices=("I", "S"), default="I")
        else:
            sp.add_argument("--embeddings", type=Path, help="embedding exchange file")
            sp.add_argument("--text-encoder", help="external encoder command")
            sp.add_argument("--typed-prompts", action="store_true",
                            help="describe sequence direction in the prompt")

    sp = add("train-retarget", cmd_train_retarget, "train the mesh retargeter on the synthetic mesh corpus")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--identities", type=int, default=20)
    sp.add_argument("--per-identity", type=int, default=48)

    sp = add("train-ic", cmd_train_ic, "train the independent evaluation classifier")
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--type", choices=("I", "S"), default="I")
    sp.add_argument("--out", type=Path, required=True)

    sp = add("sample", cmd_sample, "generate sequences")
    sp.add_argument("--denoiser", type=Path, required=True)
    sp.add_argument("--classifier", type=Path)
    sp.add_argument("--text-head", type=Path)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--length", type=int, default=40)
    sp.add_argument("--n", type=int, default=1)
    mode = sp.add_mutually_exclusive_group()
    mode.add_argument("--text", help="prompt for text control")
    mode.add_argument("--fill", type=Path, help="sequence file whose frames are partially given")
    mode.add_argument("--geometry", type=Path, help="sequence file providing the neutral face")
    sp.add_argument("--label", type=int, help="expression label (label control, or with --geometry)")
    sp.add_argument("--seq-type", choices=SEQ_TYPES)
    sp.add_argument("--protocol", choices=("FFE", "FFM", "FFB"), default="FFM")
    sp.add_argument("--embeddings", type=Path)
    sp.add_argument("--text-encoder")
    sp.add_argument("--lam", type=float)
    sp.add_argument("--opt-lr", type=float)
    sp.add_argument("--opt-steps", type=int)
    sp.add_argument("--iters", type=int, help="harmonization iterations for --geometry")

    sp = add("retarget", cmd_retarget, "animate a mesh with a landmark sequence")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--mesh", type=Path, required=True)
    sp.add_argument("--landmarks", type=Path, required=True)
    sp.add_argument("--landmark-index", type=Path)
    sp.add_argument("--format", choices=("obj", "ply"), default="obj")
    sp.add_argument("--out", type=Path, required=True)

    sp = add("evaluate", cmd_evaluate, "IC accuracy and FID of generated sequences")
    sp.add_argument("--ic", type=Path, required=True)
    sp.add_argument("--generated", type=Path, required=True)
    sp.add_argument("--reference", type=Path, required=True)
    sp.add_argument("--name", default="generated")
    sp.add_argument("--out", type=Path, required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.verbose:
            log.info("configuration:\n%s", dump_config(cfg))
        args.func(args, cfg)
    except Fex4dError as exc:
        print(f"fex4d: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - last-resort exit status
        print(f"fex4d: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
