import numpy as np
import pytest
import torch

from fex4d.denoiser import (DenoiserConfig, SequenceDenoiser, TrainSettings, pad_batch, per_item_loss,
                            sinusoidal_encoding, smoothed, train_denoiser)
from fex4d.errors import LengthExceededError, ShapeMismatchError
from fex4d.schedule import q_sample, scaled_schedule, simple_loss

from helpers import TINY, central_difference, float64_copy, rel_err, toy_corpus


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    m = SequenceDenoiser(TINY)
    # give the zero-initialised output layer some weights so outputs are non-trivial
    torch.nn.init.normal_(m.out.weight, std=0.1)
    return m.eval()


def test_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(model_dim=30, heads=4)
    with pytest.raises(ValueError):
        DenoiserConfig(dropout=1.0)
    half = DenoiserConfig().half_width()
    assert (half.layers, half.heads, half.model_dim, half.feedforward_dim) == (6, 4, 128, 512)


def test_sinusoidal_encoding_values():
    enc = sinusoidal_encoding(torch.tensor([0.0, 1.0]), 4)
    # frequencies 1 and 1e-2 for dim 4
    np.testing.assert_allclose(enc[0].numpy(), [0, 0, 1, 1])
    np.testing.assert_allclose(enc[1].numpy(), [np.sin(1), np.sin(0.01), np.cos(1), np.cos(0.01)], rtol=1e-12)


def test_embed_deterministic_and_time_additive(model):
    x = torch.randn(1, 10, 68, 3)
    a = model.embed_inputs(x, 5)
    assert torch.equal(a, model.embed_inputs(x, 5))
    b = model.embed_inputs(x, 6)
    diff = (a - b)[0]
    assert torch.all(diff.abs().sum(-1) > 0)
    # TE is frame-constant: the difference is the same row for every frame
    torch.testing.assert_close(diff, diff[:1].expand_as(diff))


def test_embed_permutation_structure(model):
    x = torch.randn(1, 9, 68, 3)
    perm = torch.randperm(9, generator=torch.Generator().manual_seed(1))
    pe = model.backbone.pos_table[:9]
    lhs = model.embed_inputs(x[:, perm], 3) - pe + pe[perm]
    torch.testing.assert_close(lhs, model.embed_inputs(x, 3)[:, perm], rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("F", [35, 40, 45])
def test_predict_noise_shape(model, F):
    out = model.predict_noise(torch.randn(F, 68, 3), 10)
    assert out.shape == (F, 68, 3)
    assert torch.isfinite(out).all()
    assert model(torch.randn(2, F, 68, 3), torch.tensor([1, 7])).shape == (2, F, 68, 3)


def test_length_and_shape_errors(model):
    with pytest.raises(LengthExceededError):
        model.predict_noise(torch.randn(65, 68, 3), 1)
    with pytest.raises(ShapeMismatchError):
        model.predict_noise(torch.randn(10, 60, 3), 1)


def test_untrained_predicts_zero():
    m = SequenceDenoiser(TINY).eval()
    assert torch.count_nonzero(m.predict_noise(torch.randn(20, 68, 3), 4)) == 0


def _tap_bias(m, k):
    # gain 1 on the tap at frame offset k, 0 elsewhere
    D, r = m.config.n_features, m.config.skip_radius
    with torch.no_grad():
        m.skip_gain.bias.zero_()
        m.skip_gain.bias[(k + r) * D:(k + r + 1) * D] = 1.0


def test_skip_path_reaches_every_coordinate():
    # TINY tokens (32) are far narrower than a frame (204); the pass-through must
    # still let the network output eps = x_t exactly, as needed at large t
    m = SequenceDenoiser(TINY).eval()
    _tap_bias(m, 0)
    x = torch.randn(2, 5, 68, 3)
    torch.testing.assert_close(m(x, 50), x)


def test_skip_taps_shift_and_clamp_to_valid_frames():
    m = SequenceDenoiser(TINY).eval()
    _tap_bias(m, 1)
    a, b = torch.randn(4, 68, 3), torch.randn(6, 68, 3)
    x, mask = pad_batch([a.numpy(), b.numpy()])
    out = m(x, 50, mask)
    # frame f reads frame min(f + 1, last valid); padding never leaks in
    torch.testing.assert_close(out[0, :4], a[[1, 2, 3, 3]])
    torch.testing.assert_close(out[1], b[[1, 2, 3, 4, 5, 5]])
    _tap_bias(m, -1)
    torch.testing.assert_close(m(x, 50, mask)[1], b[[0, 0, 1, 2, 3, 4]])


def test_skip_radius_validated():
    with pytest.raises(ValueError):
        DenoiserConfig(skip_radius=-1)


def test_padding_is_masked_out(model):
    a = torch.randn(30, 68, 3)
    b = torch.randn(40, 68, 3)
    x, mask = pad_batch([a.numpy(), b.numpy()])
    out = model(x, 12, mask)
    torch.testing.assert_close(out[0, :30], model.predict_noise(a, 12), rtol=1e-4, atol=1e-5)


def test_loss_gradient_matches_finite_differences(model):
    # analytic float32 gradients against central differences on a float64 copy
    sched = scaled_schedule(200)
    g = torch.Generator().manual_seed(3)
    x0 = torch.randn(2, 8, 68, 3, generator=g)
    eps = torch.randn(2, 8, 68, 3, generator=g)
    t = torch.tensor([20, 150])
    model.zero_grad()
    simple_loss(eps, model(q_sample(x0, t, eps, sched).x_t, t)).backward()
    m64 = float64_copy(model)
    x0d, epsd = x0.double(), eps.double()

    def loss64():
        return simple_loss(epsd, m64(q_sample(x0d, t, epsd, sched).x_t, t))

    probes = [("backbone.feature_embed.weight", (3, 17)), ("out.weight", (100, 5)),
              ("backbone.time_embed.0.bias", (2,))]
    params32, params64 = dict(model.named_parameters()), dict(m64.named_parameters())
    for name, idx in probes:
        fd = central_difference(loss64, params64[name].data, idx)
        assert rel_err(params32[name].grad[idx].item(), fd) <= 1e-3, name


def test_identical_items_identical_losses(model):
    sched = scaled_schedule(200)
    x0 = torch.randn(1, 10, 68, 3).expand(4, -1, -1, -1)
    eps = torch.randn(1, 10, 68, 3).expand(4, -1, -1, -1)
    losses = per_item_loss(model, x0, torch.full((4,), 50), eps, sched)
    assert torch.all(losses == losses[0])


def test_zero_learning_rate_leaves_parameters():
    seqs, _ = toy_corpus(8)
    torch.manual_seed(0)
    ref = SequenceDenoiser(TINY)
    before = {k: v.clone() for k, v in ref.state_dict().items()}
    res = train_denoiser(seqs, scaled_schedule(50), TINY, TrainSettings(steps=3, batch_size=4, lr=0.0), model=ref)
    for k, v in res.model.state_dict().items():
        assert torch.equal(v, before[k]), k
    assert len(res.losses) == 3


def test_training_rejects_long_sequences():
    with pytest.raises(LengthExceededError):
        train_denoiser([np.zeros((70, 68, 3), np.float32)], scaled_schedule(50), TINY, TrainSettings(steps=1))


def test_smoothed():
    assert smoothed([4.0] * 50 + [1.0] * 50, 50) == (4.0, 1.0)
    assert smoothed([2.0, 1.0], 50) == (2.0, 1.0)


@pytest.mark.slow
def test_reduced_width_smoke_training_halves_loss():
    from fex4d.data import CorpusStats, make_synthetic_corpus
    recs = make_synthetic_corpus(200, 2, seed=0, length=(35, 45))
    stats = CorpusStats.fit([r.landmarks for r in recs])
    seqs = [stats.normalize(r.landmarks) for r in recs]
    cfg = DenoiserConfig(layers=2, heads=2, model_dim=64, feedforward_dim=128, dropout=0.1)
    res = train_denoiser(seqs, scaled_schedule(200), cfg, TrainSettings(steps=2000, batch_size=16, lr=1e-3))
    first, last = smoothed(res.losses, 50)
    assert last <= 0.5 * first
