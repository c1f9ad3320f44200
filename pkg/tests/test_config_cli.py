import json
import subprocess
import sys

import numpy as np
import pytest
import torch

from fex4d.checkpoint import build_model, load_checkpoint, save_checkpoint, schedule_of, stats_of
from fex4d.cli import main
from fex4d.config import PROFILES, dump_config, env_overrides, load_config, parse_config_text, profile
from fex4d.data import CorpusStats, read_corpus, read_sequence
from fex4d.denoiser import SequenceDenoiser
from fex4d.errors import ConfigError, FormatError, MissingCheckpointError
from fex4d.schedule import scaled_schedule

from helpers import TINY

TINY_CONFIG = """
# small enough to train in seconds
schedule.T = 10
denoiser.layers = 1
denoiser.heads = 2
denoiser.model_dim = 16
denoiser.feedforward_dim = 32
train.steps = 20
train.batch_size = 8
classifier.steps = 10
classifier.batch_size = 8
text_head.steps = 10
text_head.batch_size = 8
ic.hidden = 8
ic.epochs = 3
retarget.channels = 4,4,4,4,4
retarget.steps = 3
retarget.batch_size = 2
data.n_sequences = 24
data.length_min = 8
data.length_max = 12
"""


# ---------------------------------------------------------------- config


def test_profiles():
    paper, desk = profile("paper"), profile("desk")
    assert paper.schedule.T == 2000 and paper.denoiser.layers == 6 and paper.train.batch_size == 256
    assert desk.schedule.T == 200 and desk.schedule.scale_to_reference and desk.denoiser.model_dim == 128
    assert desk.guide_config(desk.classifier).model_dim == 64
    assert desk.schedule.build().T == 200
    with pytest.raises(ConfigError):
        profile("laptop")


def test_precedence_file_env_override(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("train.steps = 7\ntrain.lr = 0.5\nguidance.lam = 0.2\n")
    env = {"FEX4D_TRAIN_STEPS": "9", "FEX4D_GUIDANCE_LAM": "0.3"}
    cfg = load_config("desk", p, {"guidance.lam": "0.4"}, environ=env)
    assert (cfg.train.steps, cfg.train.lr, cfg.guidance.lam) == (9, 0.5, 0.4)
    assert cfg.denoiser.layers == PROFILES["desk"]["denoiser.layers"]


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_config("desk", overrides={"train.stepz": "1"}, environ={})
    with pytest.raises(ConfigError):
        env_overrides({"FEX4D_NOPE_X": "1"})
    with pytest.raises(ConfigError):
        parse_config_text("no equals sign here")
    with pytest.raises(ConfigError):
        load_config("desk", overrides={"train.steps": "many"}, environ={})
    with pytest.raises(ConfigError):
        load_config("desk", overrides={"denoiser.heads": "3"}, environ={})  # 128 % 3 != 0
    with pytest.raises(ConfigError):
        load_config("desk", tmp_path / "missing.cfg", environ={})


def test_dump_round_trip_and_hash():
    cfg = load_config("desk", overrides={"retarget.fusion": "mean"}, environ={})
    again = load_config("paper", overrides=parse_config_text(dump_config(cfg)), environ={})
    assert again == cfg and again.hash() == cfg.hash()
    assert load_config("desk", environ={}).hash() != cfg.hash()


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    model = SequenceDenoiser(TINY)
    sched = scaled_schedule(20)
    stats = CorpusStats.fit([np.random.default_rng(0).normal(size=(5, 68, 3))])
    path = save_checkpoint(tmp_path / "d.pt", "denoiser", model, {"model": TINY.to_dict()}, sched, stats, {"a": 1})
    payload = load_checkpoint(path, "denoiser")
    rebuilt = build_model(payload)
    x = torch.randn(1, 6, 68, 3)
    t = torch.tensor([4])
    torch.testing.assert_close(rebuilt(x, t), model.eval()(x, t))
    np.testing.assert_array_equal(schedule_of(payload).beta, sched.beta)
    np.testing.assert_array_equal(stats_of(payload).mean, stats.mean)
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_errors(tmp_path):
    with pytest.raises(MissingCheckpointError):
        load_checkpoint(tmp_path / "none.pt")
    (tmp_path / "junk.pt").write_bytes(b"garbage")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "junk.pt")
    torch.save({"format": "other"}, tmp_path / "other.pt")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "other.pt")
    path = save_checkpoint(tmp_path / "d.pt", "denoiser", SequenceDenoiser(TINY), {"model": TINY.to_dict()})
    with pytest.raises(FormatError):
        load_checkpoint(path, "classifier")
    with pytest.raises(FormatError):
        schedule_of(load_checkpoint(path))


# ---------------------------------------------------------------- command line


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CONFIG)

    def _run(*argv):
        return main([argv[0], "--config", str(cfg), *map(str, argv[1:])])

    assert _run("make-synthetic", "--out", root / "data") == 0
    assert _run("train-diffusion", "--data", root / "data", "--out", root / "den.pt") == 0
    assert _run("train-classifier", "--data", root / "data", "--denoiser", root / "den.pt",
                "--out", root / "clf.pt") == 0
    assert _run("train-ic", "--data", root / "data", "--out", root / "ic.pt") == 0
    return root, _run


def test_cli_training_outputs(run):
    root, _ = run
    assert len(read_corpus(root / "data")) == 24
    manifest = json.loads((root / "run.json").read_text())
    assert manifest["seed"] == 0 and len(manifest["config_hash"]) == 16 and manifest["version"].startswith("0.1.0")
    assert load_checkpoint(root / "den.pt", "denoiser")["meta"]["loss_first"] > 0
    assert load_checkpoint(root / "clf.pt", "classifier")["config"]["n_classes"] == 2


def test_cli_sampling_is_deterministic(run):
    root, r = run
    for name in ("a", "b"):
        assert r("sample", "--denoiser", root / "den.pt", "--classifier", root / "clf.pt", "--label", 1,
                 "--n", 2, "--length", 9, "--seed", 3, "--out", root / name) == 0
    a, b = read_corpus(root / "a"), read_corpus(root / "b")
    assert a[0].landmarks.shape == (9, 68, 3) and a[1].label == 1
    assert all(np.array_equal(x.landmarks, y.landmarks) for x, y in zip(a, b))


def test_cli_fill_keeps_given_frames(run):
    root, r = run
    src = root / "data" / "seq_00003.4dfm"
    assert r("sample", "--denoiser", root / "den.pt", "--fill", src, "--protocol", "FFM",
             "--out", root / "fill") == 0
    given = read_sequence(src).landmarks
    out = read_corpus(root / "fill")[0].landmarks
    known = json.loads((root / "fill" / "run.json").read_text())["known_frames"]
    assert out.shape == given.shape and known[0] == 0 and known[-1] == len(given) - 1
    assert out[known].tobytes() == given[known].tobytes()


def test_cli_geometry_and_text(run):
    root, r = run
    src = root / "data" / "seq_00001.4dfm"
    assert r("sample", "--denoiser", root / "den.pt", "--geometry", src, "--iters", 2, "--length", 8,
             "--out", root / "geo") == 0
    out = read_corpus(root / "geo")[0]
    assert out.landmarks.shape == (8, 68, 3)
    assert r("train-text-head", "--data", root / "data", "--denoiser", root / "den.pt", "--out", root / "th.pt") == 0
    assert r("sample", "--denoiser", root / "den.pt", "--text-head", root / "th.pt", "--text", "a smile",
             "--length", 8, "--out", root / "txt") == 0


def test_cli_evaluate_reference_against_itself(run):
    root, r = run
    assert r("evaluate", "--ic", root / "ic.pt", "--generated", root / "data", "--reference", root / "data",
             "--out", root / "eval" / "report.txt") == 0
    lines = dict(l.split("=") for l in (root / "eval" / "report.txt").read_text().split())
    assert float(lines["generated.fid"]) <= 1e-6
    assert (root / "eval" / "report.csv").exists()


def test_cli_retarget(run):
    root, r = run
    assert r("train-retarget", "--identities", 2, "--per-identity", 4, "--out", root / "ret" / "model.pt") == 0
    assert r("retarget", "--model", root / "ret" / "model.pt", "--mesh", root / "ret" / "template.obj",
             "--landmarks", root / "data" / "seq_00000.4dfm", "--landmark-index", root / "ret" / "landmarks.txt",
             "--format", "ply", "--out", root / "meshes") == 0
    frames = sorted((root / "meshes").glob("frame_*.ply"))
    assert len(frames) == len(read_sequence(root / "data" / "seq_00000.4dfm").landmarks)


def test_cli_exit_codes(run, tmp_path):
    root, r = run
    assert r("sample", "--denoiser", tmp_path / "missing.pt", "--out", tmp_path / "o") == 4
    assert r("sample", "--denoiser", root / "den.pt", "--set", "train.nope=1", "--out", tmp_path / "o") == 3
    (tmp_path / "bad.pt").write_bytes(b"xx")
    assert r("sample", "--denoiser", tmp_path / "bad.pt", "--out", tmp_path / "o") == 5
    assert r("sample", "--denoiser", root / "den.pt", "--label", 0, "--out", tmp_path / "o") == 3  # no classifier
    with pytest.raises(SystemExit) as exc:
        main(["sample", "--bogus"])
    assert exc.value.code == 2


def test_cli_entry_point_version():
    out = subprocess.run([sys.executable, "-m", "fex4d.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("fex4d 0.1.0")
