import itertools

import numpy as np
import pytest
import torch
from torch import nn

from echo2depth.models import (DIRECT_LAYERS, WAVEFORM_LAYERS, DirectGenerator, LatentAdapter,
                               ModelConfig, PatchDiscriminator, SpectrogramEncoder,
                               UNetGenerator, WaveformEncoder, build_discriminator, build_model,
                               conv_out_length, count_parameters, load_checkpoint,
                               patch_layer_count, receptive_field, save_checkpoint, time_trace)
from echo2depth.training import make_inputs

RESOLUTIONS = (16, 32, 64, 128)


def all_configs():
    # waveform early/late x unet/direct plus spectrogram f1/f10 x unet/direct
    encoders = [dict(representation="waveform", fusion="early"),
                dict(representation="waveform", fusion="late"),
                dict(representation="spectrogram", spec_freq=1),
                dict(representation="spectrogram", spec_freq=10)]
    for enc, gen, res in itertools.product(encoders, ("unet", "direct"), RESOLUTIONS):
        yield ModelConfig(generator=gen, resolution=res, **enc)


@pytest.fixture(scope="module")
def audio():
    return np.random.default_rng(0).normal(0, 0.1, (2, 2, 3200)).astype(np.float32)


@pytest.mark.parametrize("cfg", list(all_configs()), ids=lambda c: c.label())
def test_output_shape_and_range(cfg, audio):
    model = build_model(cfg, seed=0).eval()
    with torch.no_grad():
        out = model(make_inputs(audio, cfg))
    assert out.shape == (2, cfg.resolution, cfg.resolution)
    assert torch.all((out >= 0) & (out <= 1))


def test_waveform_time_trace():
    assert time_trace() == [1600, 534, 178, 60, 20, 7, 3, 1]
    for fusion in ("early", "late"):
        assert WaveformEncoder(fusion).trace() == [1600, 534, 178, 60, 20, 7, 3, 1]


def test_table_padding_trace():
    # the listed symmetric paddings, run through floor((L + 2p - k) / s) + 1
    want = []
    length = 3200
    for _, k, s, p in WAVEFORM_LAYERS:
        length = (length + 2 * p - k) // s + 1
        want.append(length)
    assert want == [1601, 534, 179, 60, 21, 8, 3, 1]
    assert time_trace(padding="table") == want
    assert WaveformEncoder(padding="table").trace() == want
    assert conv_out_length(3200, 228, 2, 114) == 1601


@pytest.mark.parametrize("fusion", ["early", "late"])
def test_waveform_encoder_latent(fusion):
    enc = WaveformEncoder(fusion).eval()
    x = torch.randn(3, 2, 3200)
    assert enc(x).shape == (3, 1024)
    with pytest.raises(ValueError):
        enc(torch.randn(3, 2, 3000))


def test_late_fusion_sharing():
    shared = WaveformEncoder("late", shared=True)
    separate = WaveformEncoder("late", shared=False)
    assert shared.body_left is shared.body_right
    assert count_parameters(separate) > count_parameters(shared)


def test_spectrogram_encoder_latent():
    enc = SpectrogramEncoder(10).eval()
    z = enc(torch.randn(2, 2, 257, 200))
    assert z.shape == (2, 1, 10, 1024)
    # time axis reaches exactly 1 before pooling
    h = enc.net(torch.randn(1, 2, 257, 200))
    assert h.shape[-1] == 1
    assert SpectrogramEncoder(1).eval()(torch.randn(1, 2, 257, 200)).shape == (1, 1, 1, 1024)


def _zero_biases(m):
    for mod in m.modules():
        if isinstance(mod, (nn.Conv1d, nn.Conv2d, nn.Linear)) and mod.bias is not None:
            nn.init.zeros_(mod.bias)


@pytest.mark.parametrize("make,x", [
    (lambda: WaveformEncoder("early"), torch.zeros(2, 2, 3200)),
    (lambda: WaveformEncoder("late"), torch.zeros(2, 2, 3200)),
    (lambda: SpectrogramEncoder(10), torch.zeros(2, 2, 257, 200)),
])
def test_zero_input_zero_latent(make, x):
    torch.manual_seed(1)
    enc = make()
    _zero_biases(enc)
    for mode in (enc.train, enc.eval):
        mode()
        with torch.no_grad():
            assert torch.all(enc(x) == 0)


def test_latent_adapter_layers():
    assert LatentAdapter(1).fc is None
    fc = LatentAdapter(10).fc
    assert sum(isinstance(m, nn.Linear) for m in fc) == 2
    z = torch.arange(1024.0).reshape(1, 1024)
    # reshape to 32 x 32 keeps every value
    assert torch.equal(LatentAdapter(1)(z).reshape(1, 1, 32, 32).flatten(), z.flatten())


def test_unet_structure():
    g = UNetGenerator(128)
    assert [blk[0].out_channels for blk in g.down] == [32, 64, 128]
    assert g.bottleneck[0].out_channels == 256
    # skip channels are concatenated at 8, 16 and 32
    assert [m[0].in_channels for m in g.merges][:3] == [128 + 128, 64 + 64, 32 + 32]


def test_direct_resolution_trace():
    g = DirectGenerator(128).eval()
    x = torch.randn(1, 1024, 1, 1)
    sizes = []
    for m in g.net:
        x = m(x)
        if isinstance(m, nn.ConvTranspose2d):
            sizes.append(x.shape[-1])
    assert sizes == [4, 8, 16, 32, 64, 128]
    assert g.final(x).shape[-1] == 128
    assert [row[-1] for row in DIRECT_LAYERS] == [4, 8, 16, 32, 64, 128]


def test_up1_parameter_count():
    up1 = DirectGenerator(128).net[0]
    assert isinstance(up1, nn.ConvTranspose2d)
    assert count_parameters(up1) == 1024 * 512 * 4 * 4 + 512 == 8_389_120


@pytest.mark.parametrize("res,grid", [(16, 4), (32, 8), (64, 8), (128, 8)])
def test_patch_grid(res, grid):
    d = build_discriminator(res, seed=0).eval()
    out = d(torch.rand(2, 1, res, res))
    assert out.shape == (2, 1, grid, grid)


def test_patchgan_128_receptive_field():
    d = PatchDiscriminator(128)
    assert d.n_layers == patch_layer_count(128) == 4
    assert d.receptive_field == receptive_field(4) == 46
    assert abs(46 - 128 / 3) < 4
    assert sum(isinstance(m, nn.BatchNorm2d) for m in d.net) == 2


def test_receptive_field_by_gradient():
    # impulse response of the score at one cell spans exactly 46 pixels
    d = PatchDiscriminator(128).eval()
    for m in d.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.constant_(m.weight, 0.01)
    x = torch.zeros(1, 1, 128, 128, requires_grad=True)
    d(x)[0, 0, 4, 4].backward()
    rows = torch.nonzero(x.grad[0, 0].abs().sum(1)).flatten()
    assert int(rows.max() - rows.min() + 1) == 46


def test_constant_image_constant_interior_scores():
    d = build_discriminator(128, seed=3).eval()
    with torch.no_grad():
        s = d(torch.full((1, 1, 128, 128), 0.37))[0, 0]
    interior = s[2:-2, 2:-2]
    assert torch.allclose(interior, interior[0, 0].expand_as(interior), atol=1e-6)


def test_inference_is_bit_stable(audio):
    cfg = ModelConfig(representation="spectrogram", generator="unet", resolution=32)
    model = build_model(cfg, seed=5).eval()
    x = make_inputs(audio, cfg)
    with torch.no_grad():
        a, b = model(x), model(x)
    assert torch.equal(a, b)
    again = build_model(cfg, seed=5).eval()
    with torch.no_grad():
        assert torch.equal(again(x), a)


def test_init_statistics():
    model = build_model(ModelConfig(generator="direct", resolution=64), seed=0)
    w = model.generator.net[0].weight.detach()
    assert abs(float(w.mean())) < 1e-3
    assert float(w.std()) == pytest.approx(0.02, rel=0.02)
    for m in model.modules():
        if isinstance(m, (nn.Conv1d, nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            assert torch.all(m.bias == 0)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(representation="spectrogram", fusion="late").validate()
    with pytest.raises(ValueError):
        ModelConfig(resolution=48).validate()
    with pytest.raises(ValueError):
        ModelConfig(generator="vae").validate()


def test_checkpoint_round_trip(tmp_path, audio):
    cfg = ModelConfig(representation="waveform", fusion="late", generator="unet", resolution=16)
    model = build_model(cfg, seed=2)
    # move batch-norm statistics off their defaults
    model.train()
    model(make_inputs(audio, cfg))
    model.eval()
    path = tmp_path / "m.npz"
    save_checkpoint(path, model, {"target": "gray", "regime": "gan"})
    loaded, meta = load_checkpoint(path)
    assert meta["target"] == "gray" and meta["model"]["fusion"] == "late"
    assert not loaded.training
    with torch.no_grad():
        assert torch.equal(loaded(make_inputs(audio, cfg)), model(make_inputs(audio, cfg)))
    with np.load(path) as z:
        assert z["__config__"].dtype == np.uint8
