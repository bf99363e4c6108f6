"""Audio encoders, image generators and the patch discriminator.

Layer tables are plain tuples ``(filters, kernel, stride, padding)`` so the
architectures can be inspected and shrunk for tests.
"""
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

LEAKY_SLOPE = 0.2
LATENT_DIM = 1024
RESOLUTIONS = (16, 32, 64, 128)

# waveform encoder, Conv1..Conv8
WAVEFORM_LAYERS = (
    (32, 228, 2, 114),
    (64, 128, 3, 64),
    (128, 64, 3, 32),
    (256, 32, 3, 16),
    (256, 16, 3, 8),
    (512, 8, 3, 4),
    (512, 4, 3, 2),
    (1024, 3, 3, 1),
)

# spectrogram encoder: (filters, (kf, kt), (sf, st), (pf, pt)); time stride 2
# everywhere (200 -> 1 over eight layers), frequency stride 2 on the first four
SPECTROGRAM_LAYERS = tuple(
    (f, (3, 3), (2 if i < 4 else 1, 2), (1, 1))
    for i, (f, *_rest) in enumerate(WAVEFORM_LAYERS)
)

# direct upsampling generator, Up1..Up6 then Final; last field is output resolution
DIRECT_LAYERS = (
    (512, 4, 1, 0, 4),
    (512, 4, 2, 1, 8),
    (256, 4, 2, 1, 16),
    (128, 4, 2, 1, 32),
    (128, 4, 2, 1, 64),
    (64, 4, 2, 1, 128),
)

# PatchGAN for 128x128 inputs: four k4/s2/p1 convolutions
PATCH_FILTERS = (64, 128, 256)


def conv_out_length(length, kernel, stride, padding):
    return (length + 2 * padding - kernel) // stride + 1


def same_padding(length, kernel, stride):
    """``(left, right)`` zero padding giving ``ceil(length / stride)`` outputs."""
    out = -(-length // stride)
    total = max((out - 1) * stride + kernel - length, 0)
    return total // 2, total - total // 2


def time_trace(length=3200, layers=WAVEFORM_LAYERS, padding="same"):
    """Output length after each conv of the waveform encoder.

    ``padding="same"`` pads each layer to ``ceil(L / stride)`` outputs;
    ``"table"`` uses the symmetric paddings listed in the layer table.
    """
    out = []
    for _, k, s, p in layers:
        if padding == "same":
            length = -(-length // s)
        else:
            length = conv_out_length(length, k, s, p)
        out.append(length)
    return out


def act():
    return nn.LeakyReLU(LEAKY_SLOPE)


def init_weights(module: nn.Module):
    """N(0, 0.02) for conv/linear weights, zero biases; batch norm left at (1, 0)."""
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


# ---------------------------------------------------------------------------
# audio encoders


def _layer_pads(layers, length, padding):
    pads = []
    for _, k, s, p in layers:
        pads.append(same_padding(length, k, s) if padding == "same" else (p, p))
        length = (length + sum(pads[-1]) - k) // s + 1
    return pads


def _conv1d_stack(in_channels, layers, pads):
    mods = []
    c = in_channels
    for (f, k, s, _), pad in zip(layers, pads):
        mods += [nn.ConstantPad1d(pad, 0.0), nn.Conv1d(c, f, k, s), nn.BatchNorm1d(f), act()]
        c = f
    return nn.Sequential(*mods)


class WaveformEncoder(nn.Module):
    """1-D conv stack over raw two-channel audio -> ``(batch, 1024)``.

    ``fusion="early"`` stacks the ears as input channels.  ``"late"`` runs
    one stack per ear through all but the last layer and concatenates the
    features at the last layer's input.  Every conv but the last is followed
    by batch norm and leaky ReLU; the last is a linear projection whose time
    axis is averaged away (it is already 1 for 3200-sample input).
    """

    def __init__(self, fusion="early", layers=WAVEFORM_LAYERS, input_length=3200,
                 shared=False, padding="same"):
        super().__init__()
        if fusion not in ("early", "late"):
            raise ValueError(f"unknown fusion {fusion!r}")
        if padding not in ("same", "table"):
            raise ValueError(f"unknown padding mode {padding!r}")
        self.fusion = fusion
        self.input_length = input_length
        self.layers = tuple(layers)
        pads = _layer_pads(self.layers, input_length, padding)
        *body, last = self.layers
        width = body[-1][0] if body else 0
        if fusion == "early":
            self.body = _conv1d_stack(2, body, pads[:-1])
            head_in = width if body else 2
        else:
            self.body_left = _conv1d_stack(1, body, pads[:-1])
            self.body_right = self.body_left if shared else _conv1d_stack(1, body, pads[:-1])
            head_in = 2 * width if body else 2
        f, k, s, _ = last
        self.head = nn.Sequential(nn.ConstantPad1d(pads[-1], 0.0), nn.Conv1d(head_in, f, k, s))
        self.out_dim = f

    def trace(self, x=None):
        """Time length after every conv (per-ear stack for late fusion)."""
        x = torch.zeros(1, 2, self.input_length) if x is None else x
        lengths = []
        h = x if self.fusion == "early" else x[:, :1]
        body = self.body if self.fusion == "early" else self.body_left
        for m in body:
            h = m(h)
            if isinstance(m, nn.Conv1d):
                lengths.append(h.shape[-1])
        if self.fusion == "late":
            h = torch.cat([h, h], dim=1)
        lengths.append(self.head(h).shape[-1])
        return lengths

    def forward(self, x):
        if x.dim() != 3 or x.shape[1] != 2 or x.shape[2] != self.input_length:
            raise ValueError(f"expected (batch, 2, {self.input_length}) audio, got {tuple(x.shape)}")
        if self.fusion == "early":
            h = self.body(x)
        else:
            h = torch.cat([self.body_left(x[:, :1]), self.body_right(x[:, 1:])], dim=1)
        h = self.head(h)
        return h.mean(dim=2)


class SpectrogramEncoder(nn.Module):
    """2-D conv stack over ``(batch, 2, 257, 200)`` spectrograms.

    Time is halved by every layer until it reaches 1; the frequency axis is
    then average-pooled to ``freq_out`` bins.  Output ``(batch, 1, freq_out, 1024)``
    laid out as time x frequency x channels.
    """

    def __init__(self, freq_out=10, layers=SPECTROGRAM_LAYERS, input_shape=(257, 200)):
        super().__init__()
        self.freq_out = freq_out
        self.input_shape = tuple(input_shape)
        mods = []
        c = 2
        *body, last = layers
        for f, k, s, p in body:
            mods += [nn.Conv2d(c, f, k, s, p), nn.BatchNorm2d(f), act()]
            c = f
        f, k, s, p = last
        mods.append(nn.Conv2d(c, f, k, s, p))
        self.net = nn.Sequential(*mods)
        self.out_dim = f

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 2 or tuple(x.shape[2:]) != self.input_shape:
            raise ValueError(f"expected (batch, 2, {self.input_shape[0]}, {self.input_shape[1]}) "
                             f"spectrograms, got {tuple(x.shape)}")
        h = self.net(x)                      # (B, C, F', T')
        if h.shape[3] != 1:
            raise ValueError(f"time axis reduced to {h.shape[3]}, not 1")
        h = F.adaptive_avg_pool2d(h, (self.freq_out, 1))
        return h.squeeze(3).transpose(1, 2).unsqueeze(1)   # (B, 1, f, C)


# ---------------------------------------------------------------------------
# generators


class LatentAdapter(nn.Module):
    """Flatten the encoder output to 1024 values.

    A ``1 x f x 1024`` latent with ``f != 1`` goes through two fully
    connected layers first.
    """

    def __init__(self, freq=1, dim=LATENT_DIM):
        super().__init__()
        self.freq = freq
        self.fc = None
        if freq != 1:
            self.fc = nn.Sequential(nn.Linear(freq * dim, dim), act(), nn.Linear(dim, dim))

    def forward(self, z):
        z = z.reshape(z.shape[0], -1)
        return self.fc(z) if self.fc is not None else z


def double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, 1, 1), nn.BatchNorm2d(cout), act(),
        nn.Conv2d(cout, cout, 3, 1, 1), nn.BatchNorm2d(cout), act(),
    )


class UNetGenerator(nn.Module):
    """Latent reshaped to a 32x32 single-channel image, then a UNet.

    Three down blocks (32, 64, 128 channels) bring 32x32 to a 4x4
    bottleneck; up blocks (transposed conv + double conv) climb to
    ``target_res`` with skips at 8, 16 and 32 when those levels are reached.
    """

    down_channels = (32, 64, 128)

    def __init__(self, target_res=128, freq=1):
        super().__init__()
        if target_res not in RESOLUTIONS:
            raise ValueError(f"unsupported resolution {target_res}")
        self.target_res = target_res
        self.adapter = LatentAdapter(freq)
        self.down = nn.ModuleList()
        c = 1
        for f in self.down_channels:
            self.down.append(double_conv(c, f))
            c = f
        self.bottleneck = double_conv(c, 2 * c)
        c = 2 * c
        skips = {8: 128, 16: 64, 32: 32}
        self.ups = nn.ModuleList()
        self.merges = nn.ModuleList()
        res = 4
        while res < target_res:
            res *= 2
            out = max(32, c // 2)
            self.ups.append(nn.Sequential(nn.ConvTranspose2d(c, out, 4, 2, 1),
                                          nn.BatchNorm2d(out), act()))
            self.merges.append(double_conv(out + skips.get(res, 0), out))
            c = out
        self.final = nn.Conv2d(c, 1, 1)

    def forward(self, z):
        x = self.adapter(z).reshape(-1, 1, 32, 32)
        skips = {}
        for block in self.down:
            x = block(x)
            skips[x.shape[-1]] = x
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, merge in zip(self.ups, self.merges):
            x = up(x)
            if x.shape[-1] in skips:
                x = torch.cat([x, skips[x.shape[-1]]], dim=1)
            x = merge(x)
        return torch.sigmoid(self.final(x))


class DirectGenerator(nn.Module):
    """Transposed-conv stack from a 1x1x1024 latent.

    Uses the Up rows of ``DIRECT_LAYERS`` until ``target_res`` is reached,
    then a 1x1 output layer and a sigmoid.
    """

    def __init__(self, target_res=128, freq=1, layers=DIRECT_LAYERS, latent_dim=LATENT_DIM):
        super().__init__()
        if target_res not in {row[-1] for row in layers}:
            raise ValueError(f"unsupported resolution {target_res}")
        self.target_res = target_res
        self.adapter = LatentAdapter(freq, latent_dim)
        self.latent_dim = latent_dim
        mods = []
        c = latent_dim
        for f, k, s, p, res in layers:
            mods += [nn.ConvTranspose2d(c, f, k, s, p), nn.BatchNorm2d(f), act()]
            c = f
            if res == target_res:
                break
        self.net = nn.Sequential(*mods)
        self.final = nn.Conv2d(c, 1, 1, 1, 0)

    def forward(self, z):
        x = self.adapter(z).reshape(-1, self.latent_dim, 1, 1)
        return torch.sigmoid(self.final(self.net(x)))


# ---------------------------------------------------------------------------
# discriminator


def patch_layer_count(resolution):
    """Number of k4/s2 convs so the score grid is 8x8 (4 at 128); at least 2."""
    return max(2, int(np.log2(resolution)) - 3)


def receptive_field(n_layers, kernel=4, stride=2):
    rf, jump = 1, 1
    for _ in range(n_layers):
        rf += (kernel - 1) * jump
        jump *= stride
    return rf


class PatchDiscriminator(nn.Module):
    """PatchGAN: stride-2 4x4 convs, batch norm on the middle layers, one
    real/fake score per output cell (no sigmoid; scores feed least squares)."""

    def __init__(self, resolution=128, n_layers=None, filters=PATCH_FILTERS, in_channels=1):
        super().__init__()
        self.resolution = resolution
        n_layers = patch_layer_count(resolution) if n_layers is None else n_layers
        self.n_layers = n_layers
        widths = list(filters[: n_layers - 1])
        while len(widths) < n_layers - 1:
            widths.append(widths[-1] * 2)
        mods = []
        c = in_channels
        for i, f in enumerate(widths):
            mods.append(nn.Conv2d(c, f, 4, 2, 1))
            if i > 0:
                mods.append(nn.BatchNorm2d(f))
            mods.append(act())
            c = f
        mods.append(nn.Conv2d(c, 1, 4, 2, 1))
        self.net = nn.Sequential(*mods)

    @property
    def receptive_field(self):
        return receptive_field(self.n_layers)

    def forward(self, img):
        if img.shape[-1] != self.resolution or img.shape[-2] != self.resolution:
            raise ValueError(f"expected {self.resolution}x{self.resolution} images, "
                             f"got {tuple(img.shape[-2:])}")
        return self.net(img)


# ---------------------------------------------------------------------------
# full model and checkpoints


@dataclass
class ModelConfig:
    representation: str = "waveform"   # waveform | spectrogram
    fusion: str = "early"              # early | late (waveform only)
    generator: str = "direct"          # direct | unet
    resolution: int = 16
    spec_freq: int = 10                # f of the 1 x f x 1024 spectrogram latent
    late_shared: bool = False
    log_magnitude: bool = False

    def validate(self):
        if self.representation not in ("waveform", "spectrogram"):
            raise ValueError(f"unknown representation {self.representation!r}")
        if self.fusion not in ("early", "late"):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if self.representation == "spectrogram" and self.fusion != "early":
            raise ValueError("spectrograms only support early fusion")
        if self.generator not in ("direct", "unet"):
            raise ValueError(f"unknown generator {self.generator!r}")
        if self.resolution not in RESOLUTIONS:
            raise ValueError(f"unsupported resolution {self.resolution}")
        return self

    @property
    def latent_freq(self):
        return self.spec_freq if self.representation == "spectrogram" else 1

    def label(self):
        rep = self.representation
        if rep == "spectrogram":
            rep += f"_f{self.spec_freq}"
        return f"{rep}-{self.fusion}-{self.generator}-{self.resolution}"


class AudioToImage(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        if cfg.representation == "waveform":
            self.encoder = WaveformEncoder(cfg.fusion, shared=cfg.late_shared)
        else:
            self.encoder = SpectrogramEncoder(cfg.spec_freq)
        gen = UNetGenerator if cfg.generator == "unet" else DirectGenerator
        self.generator = gen(cfg.resolution, freq=cfg.latent_freq)

    def forward(self, x):
        return self.generator(self.encoder(x)).squeeze(1)


def build_model(cfg: ModelConfig, seed: int | None = None) -> AudioToImage:
    if seed is not None:
        torch.manual_seed(seed)
    model = AudioToImage(cfg)
    init_weights(model)
    return model


def build_discriminator(resolution: int, seed: int | None = None) -> PatchDiscriminator:
    if seed is not None:
        torch.manual_seed(seed)
    d = PatchDiscriminator(resolution)
    init_weights(d)
    return d


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_checkpoint(path, model: AudioToImage, extra: dict | None = None):
    """Write an ``.npz`` archive: one array per state-dict entry plus a
    ``__config__`` entry holding UTF-8 JSON (model config and ``extra``)."""
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"model": asdict(model.cfg), **(extra or {})}
    arrays["__config__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Returns ``(model in eval mode, metadata dict)``."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["__config__"]).decode())
        state = {k: torch.from_numpy(z[k].copy()) for k in z.files if k != "__config__"}
    model = AudioToImage(ModelConfig(**meta["model"]))
    model.load_state_dict(state)
    model.eval()
    return model, meta
