import csv

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from echo2depth.dataset import SplitArrays
from echo2depth.models import DirectGenerator, PatchDiscriminator, WaveformEncoder, init_weights
from echo2depth.simulate import simulate_sample
from echo2depth.training import (TrainConfig, TrainingDiverged, _check_finite, baseline_mean_depth,
                                 baseline_random, expected_random_l1, gan_step, l1_loss, l1_step,
                                 lsgan_d_loss, lsgan_g_loss, make_optimizer, mean_l1, train)
from oracles import central_difference


# -- losses -------------------------------------------------------------------

def test_l1_examples():
    assert float(l1_loss(torch.ones(2, 4, 4), torch.ones(2, 4, 4))) == 0.0
    assert float(l1_loss(torch.zeros(3, 4, 4), torch.full((3, 4, 4), 0.5))) == 0.5
    with pytest.raises(ValueError):
        l1_loss(torch.zeros(2, 4, 4), torch.zeros(2, 8, 8))


def test_lsgan_examples():
    one, zero, half = torch.ones(4, 1, 8, 8), torch.zeros(4, 1, 8, 8), torch.full((4, 1, 8, 8), .5)
    assert float(lsgan_d_loss(one, zero)) == 0.0
    assert float(lsgan_d_loss(zero, one)) == 2.0
    assert float(lsgan_d_loss(half, half)) == 0.5
    assert float(lsgan_g_loss(one)) == 0.0
    assert float(lsgan_g_loss(zero)) == 1.0
    assert float(lsgan_g_loss(half)) == 0.25


@settings(max_examples=100)
@given(st.lists(st.floats(-10, 10), min_size=4, max_size=4),
       st.lists(st.floats(-10, 10), min_size=4, max_size=4))
def test_losses_non_negative(a, b):
    a, b = torch.tensor(a), torch.tensor(b)
    assert float(l1_loss(a, b)) >= 0
    assert float(lsgan_d_loss(a, b)) >= 0
    assert float(lsgan_g_loss(a)) >= 0


# -- baselines ----------------------------------------------------------------

def test_random_baseline_closed_form():
    assert expected_random_l1(np.full((4, 4), 0.5)) == 0.25
    assert expected_random_l1(np.zeros((2, 2))) == 0.5
    rng = np.random.default_rng(0)
    for c in (0.1, 0.5, 0.9):
        target = np.full((2000, 16, 16), c)
        measured = mean_l1(baseline_random(rng, target.shape), target)
        assert measured == pytest.approx(c * c - c + 0.5, abs=2e-3)
    u = baseline_random(rng, (100_000,))
    assert u.min() >= 0 and u.max() < 1


def test_mean_baseline():
    img = np.random.default_rng(1).random((16, 16))
    np.testing.assert_allclose(baseline_mean_depth(np.stack([img] * 5)), img)
    np.testing.assert_allclose(baseline_mean_depth(np.stack([np.zeros((2, 2)), np.ones((2, 2))])),
                               0.5)
    with pytest.raises(ValueError):
        baseline_mean_depth(np.zeros((0, 4, 4)))


# -- gradient check on a miniature network ------------------------------------

class Mini(nn.Module):
    """2 x 64 audio -> two-layer waveform encoder -> 4 x 4 image."""

    def __init__(self):
        super().__init__()
        self.encoder = WaveformEncoder("early", layers=((4, 8, 4, 2), (16, 4, 4, 1)),
                                       input_length=64)
        self.generator = DirectGenerator(4, layers=((8, 2, 1, 0, 2), (4, 4, 2, 1, 4)),
                                         latent_dim=16)

    def forward(self, x):
        return self.generator(self.encoder(x)).squeeze(1)


def _mini_setup():
    torch.manual_seed(0)
    gen = Mini().double()
    disc = PatchDiscriminator(4, n_layers=2, filters=(4,)).double()
    for m in (gen, disc):
        # larger weights than the N(0, 0.02) init so every term is well above FD noise
        for p in m.parameters():
            if p.dim() > 1:
                nn.init.normal_(p, 0.0, 0.5)
            else:
                nn.init.normal_(p, 0.0, 0.1)
    gen.eval()
    disc.eval()
    x = torch.randn(3, 2, 64, dtype=torch.float64)
    y = torch.rand(3, 4, 4, dtype=torch.float64)
    return gen, disc, x, y


def _rel_err(a, b):
    a = torch.cat([t.flatten() for t in a])
    b = torch.cat([t.flatten() for t in b])
    return float((a - b).norm() / max(float(a.norm() + b.norm()), 1e-30))


@pytest.mark.parametrize("which", ["l1", "gan_d", "gan_g"])
def test_gradients_match_finite_differences(which):
    gen, disc, x, y = _mini_setup()
    assert gen.encoder.trace(torch.zeros(1, 2, 64, dtype=torch.float64)) == [16, 4]

    def loss():
        fake = gen(x)
        if which == "l1":
            return l1_loss(fake, y)
        if which == "gan_d":
            return lsgan_d_loss(disc(y.unsqueeze(1)), disc(fake.unsqueeze(1)))
        return lsgan_g_loss(disc(fake.unsqueeze(1)))

    params = [p for p in (disc if which == "gan_d" else gen).parameters()]
    for p in params:
        p.grad = None
    loss().backward()
    analytic = [p.grad.clone() for p in params]
    numeric = central_difference(loss, params, eps=1e-6)
    assert _rel_err(analytic, numeric) < 1e-4


# -- update rules -------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_data():
    recs = [simulate_sample(s, "train", resolution=16) for s in range(12)]

    def arrays(rs):
        return SplitArrays(np.stack([r.clip.data for r in rs]).astype(np.float32),
                           np.stack([r.depth for r in rs]).astype(np.float32),
                           np.stack([r.gray for r in rs]).astype(np.float32),
                           np.array([i for i in range(len(rs))]), [r.id for r in rs])

    return {"train": arrays(recs[:8]), "val": arrays(recs[8:])}


def _batch(data, n=4):
    return torch.from_numpy(data["train"].audio[:n]), torch.from_numpy(data["train"].depth[:n])


def _changed(before, module):
    after = [p.detach() for p in module.parameters()]
    return np.mean([not torch.equal(a, b) for a, b in zip(before, after)])


@pytest.mark.parametrize("generator", ["direct", "unet"])
def test_gradient_flow_gen_only(tiny_data, generator):
    cfg = TrainConfig(generator=generator)
    from echo2depth.models import build_model

    model = build_model(cfg.model_config(), seed=0).train()
    opt = make_optimizer(model, cfg)
    before = [p.detach().clone() for p in model.parameters()]
    l1_step(model, opt, *_batch(tiny_data))
    assert _changed(before, model) >= 0.99


def test_gradient_flow_gan(tiny_data):
    from echo2depth.models import build_discriminator, build_model

    cfg = TrainConfig(regime="gan", representation="spectrogram", generator="unet")
    model = build_model(cfg.model_config(), seed=0).train()
    disc = build_discriminator(16, seed=1).train()
    opt_g, opt_d = make_optimizer(model, cfg), make_optimizer(disc, cfg)
    bg = [p.detach().clone() for p in model.parameters()]
    bd = [p.detach().clone() for p in disc.parameters()]
    from echo2depth.training import make_inputs

    x = make_inputs(tiny_data["train"].audio[:4], cfg)
    y = torch.from_numpy(tiny_data["train"].depth[:4])
    row = gan_step(model, disc, opt_g, opt_d, x, y, 100.0)
    assert _changed(bg, model) >= 0.99
    assert _changed(bd, disc) >= 0.99
    assert row["total_g"] == row["gan_g"] + 100.0 * row["l1"]


class ConstantD(nn.Module):
    def __init__(self, value=0.3):
        super().__init__()
        self.bias = nn.Parameter(torch.tensor(value))

    def forward(self, img):
        return self.bias.expand(img.shape[0], 1, 2, 2)


def test_frozen_discriminator_reduces_to_l1(tiny_data):
    # a constant discriminator contributes no generator gradient
    from echo2depth.models import build_model

    cfg = TrainConfig(regime="gan")
    x, y = _batch(tiny_data)
    grads = []
    for use_gan in (True, False):
        model = build_model(cfg.model_config(), seed=0).train()
        fake = model(x)
        lam = 100.0
        loss = lam * l1_loss(fake, y)
        if use_gan:
            loss = lsgan_g_loss(ConstantD()(fake.unsqueeze(1))) + loss
        loss.backward()
        grads.append([p.grad.clone() for p in model.parameters()])
    for a, b in zip(*grads):
        torch.testing.assert_close(a, b, rtol=0, atol=1e-6)


def test_discriminator_separates_constant_images():
    torch.manual_seed(0)
    disc = PatchDiscriminator(16)
    init_weights(disc)
    disc.train()
    cfg = TrainConfig(regime="gan")
    opt = make_optimizer(disc, cfg)
    real = torch.full((16, 1, 16, 16), 0.8)
    fake = torch.full((16, 1, 16, 16), 0.2)
    for _ in range(300):
        loss = lsgan_d_loss(disc(real), disc(fake))
        opt.zero_grad()
        (0.5 * loss).backward()
        opt.step()
    disc.eval()
    with torch.no_grad():
        assert float(lsgan_d_loss(disc(real), disc(fake))) < 0.1


def test_divergence_guard():
    _check_finite(1.0, 0.0)
    with pytest.raises(TrainingDiverged):
        _check_finite(1.0, float("nan"))
    with pytest.raises(TrainingDiverged):
        _check_finite(float("inf"))


# -- whole runs ---------------------------------------------------------------

def test_run_writes_curves_and_checkpoint(tiny_data, tmp_path):
    cfg = TrainConfig(regime="gan", epochs=2, batch_size=4, seed=3)
    res = train(cfg, tiny_data, tmp_path)
    assert len(res.curve) == 4 and len(res.epochs) == 2
    assert res.best_val_l1 == min(e["val_l1"] for e in res.epochs)
    with open(tmp_path / "loss_curve.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["step", "l1", "gan_g", "gan_d", "total_g", "epoch"]
    for r in rows:
        assert abs(float(r["total_g"]) - (float(r["gan_g"]) + 100 * float(r["l1"]))) <= 1e-6
    assert (tmp_path / "epochs.csv").exists() and (tmp_path / "best.npz").exists()


def test_same_seed_same_run(tiny_data):
    cfg = TrainConfig(epochs=2, batch_size=4, seed=9, representation="spectrogram")
    a = train(cfg, tiny_data)
    b = train(cfg, tiny_data)
    assert [r["l1"] for r in a.curve] == [r["l1"] for r in b.curve]
    assert a.curve[-1]["l1"] == pytest.approx(b.curve[-1]["l1"], abs=1e-6)
    c = train(TrainConfig(epochs=2, batch_size=4, seed=10, representation="spectrogram"),
              tiny_data)
    assert [r["l1"] for r in a.curve] != [r["l1"] for r in c.curve]


def test_regime_defaults_and_config_parsing():
    g = TrainConfig()
    assert (g.lr, g.beta1, g.beta2) == (1e-4, 0.9, 0.999)
    d = TrainConfig(regime="gan")
    assert (d.lr, d.beta1, d.beta2, d.lambda_l1, d.batch_size) == (2e-4, 0.5, 0.999, 100.0, 16)
    c = TrainConfig.from_mapping({"regime": "gan", "epochs": "3", "jitter": "false",
                                  "lr": "0.001"})
    assert c.epochs == 3 and c.jitter is False and c.lr == 1e-3
    with pytest.raises(ValueError):
        TrainConfig.from_mapping({"learning_rate": "1"})
    with pytest.raises(ValueError):
        TrainConfig(regime="vae")
    with pytest.raises(ValueError):
        TrainConfig(target="normals")


def test_max_steps_and_warm_start(tiny_data, tmp_path):
    first = train(TrainConfig(epochs=5, batch_size=4, max_steps=3), tiny_data, tmp_path / "a")
    assert len(first.curve) == 3
    warm = TrainConfig(regime="gan", epochs=1, batch_size=4, max_steps=1,
                       warm_start=str(tmp_path / "a" / "best.npz"))
    res = train(warm, tiny_data)
    assert len(res.curve) == 1
