"""Audio and depth preprocessing.

Chirp synthesis, chirp-onset synchronisation, fixed-length windowing with
jitter augmentation, STFT magnitudes and depth normalisation.  All functions
are pure and safe to call from data-loading workers.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels

SAMPLE_RATE = 44100
CLIP_LENGTH = 3200
CHIRP_F_START = 20.0
CHIRP_F_END = 20000.0
CHIRP_DURATION = 0.003
MAX_RANGE_M = 12.0
JITTER_FRACTION = 0.3
MAX_JITTER = int(round(JITTER_FRACTION * CLIP_LENGTH))  # 960

FFT_SIZE = 512
WINDOW_LENGTH = 64
HOP_LENGTH = 16
N_FREQ = FFT_SIZE // 2 + 1  # 257
N_FRAMES = -(-CLIP_LENGTH // HOP_LENGTH)  # 200

ONSET_MIN_CORRELATION = 0.3
FIRST_PEAK_RATIO = 0.8
GUARD_CHIRPS = 2  # silent guard after the chirp in the onset template


class ChirpNotFoundError(ValueError):
    """Raised when a recording has no chirp-like segment."""


@dataclass
class BinauralClip:
    """Two-channel window of ``CLIP_LENGTH`` samples.

    ``onset_index`` is the chirp position in the source recording and
    ``shift`` the jitter applied when the window was cut (0 if none).
    """

    data: np.ndarray
    onset_index: int = 0
    shift: int = 0
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.shape != (2, CLIP_LENGTH):
            raise ValueError(f"clip must have shape (2, {CLIP_LENGTH}), got {self.data.shape}")

    @property
    def left(self) -> np.ndarray:
        return self.data[0]

    @property
    def right(self) -> np.ndarray:
        return self.data[1]


def synthesize_chirp(f_start=CHIRP_F_START, f_end=CHIRP_F_END,
                     duration=CHIRP_DURATION, sample_rate=SAMPLE_RATE) -> np.ndarray:
    """Linear FM sweep from ``f_start`` to ``f_end`` Hz, peak amplitude 1.

    The phase is ``2*pi*(f_start*t + (f_end - f_start)*t**2 / (2*duration))``
    sampled at ``t = n / sample_rate`` for ``round(duration*sample_rate)``
    samples.
    """
    if not 0 < f_start < f_end:
        raise ValueError("need 0 < f_start < f_end")
    if f_end > sample_rate / 2:
        raise ValueError(f"f_end={f_end} exceeds the Nyquist frequency {sample_rate / 2}")
    if duration <= 0:
        raise ValueError("duration must be positive")
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    phase = 2 * np.pi * (f_start * t + (f_end - f_start) * t ** 2 / (2 * duration))
    s = np.sin(phase)
    return s / np.max(np.abs(s))


def chirp_instantaneous_frequency(t, f_start=CHIRP_F_START, f_end=CHIRP_F_END,
                                  duration=CHIRP_DURATION):
    return f_start + (f_end - f_start) * np.asarray(t) / duration


def _as_two_channel(recording) -> np.ndarray:
    rec = np.asarray(recording, dtype=np.float64)
    if rec.ndim == 1:
        rec = np.stack([rec, rec])
    if rec.ndim != 2 or rec.shape[0] != 2:
        raise ValueError(f"expected a (2, n) recording, got shape {rec.shape}")
    return rec


def onset_correlation(recording, chirp) -> np.ndarray:
    """Normalised cross-correlation of the channel mean with the chirp.

    The template is the chirp followed by a silent guard two chirps long, so
    a window only scores near 1 when the chirp is not immediately followed
    by energy of similar strength, and 396 samples of pure noise stay well
    below the detection threshold.  Index ``i`` scores the chirp starting at
    sample ``i``; only windows that fit entirely in the recording are scored.
    """
    rec = _as_two_channel(recording)
    chirp = np.asarray(chirp, dtype=np.float64)
    mono = rec.mean(axis=0)
    template = np.concatenate([chirp, np.zeros(GUARD_CHIRPS * chirp.shape[0])])
    if mono.shape[0] <= chirp.shape[0]:
        raise ValueError("recording must be longer than the chirp")
    if mono.shape[0] < template.shape[0]:
        # short recordings: score what exists, with the guard running into silence
        mono = np.concatenate([mono, np.zeros(template.shape[0] - mono.shape[0])])
    return kernels.normalized_xcorr(mono, template)


def locate_chirp_onset(recording, chirp, min_correlation=ONSET_MIN_CORRELATION) -> int:
    """Index of the direct chirp arrival in ``recording``.

    The correlation is scale invariant, so a weak echo in a quiet stretch can
    score as high as the direct sound.  Echoes always come later, so the
    first window scoring within ``FIRST_PEAK_RATIO`` of the maximum is taken
    and refined to its local maximum over one chirp length.
    """
    ncc = onset_correlation(recording, chirp)
    peak = float(np.max(ncc))
    if not peak >= min_correlation:
        raise ChirpNotFoundError(
            f"no chirp found: peak correlation {peak:.3f} < {min_correlation}")
    first = int(np.argmax(ncc >= max(min_correlation, FIRST_PEAK_RATIO * peak)))
    seg = ncc[first:first + len(chirp)]
    return first + int(np.argmax(seg))


def extract_window(recording, onset: int, length: int = CLIP_LENGTH) -> BinauralClip:
    rec = _as_two_channel(recording)
    onset = int(onset)
    if onset < 0 or onset + length > rec.shape[1]:
        raise ValueError(
            f"window [{onset}, {onset + length}) outside recording of {rec.shape[1]} samples")
    return BinauralClip(rec[:, onset:onset + length].copy(), onset_index=onset)


def draw_jitter(rng: np.random.Generator, size=None):
    """Raw window shift, uniform on the integers in [-960, 960]."""
    return rng.integers(-MAX_JITTER, MAX_JITTER + 1, size=size)


def fold_jitter(delta):
    """Mirror positive shifts so the chirp start always stays in the window."""
    return -np.abs(delta) if np.ndim(delta) else -abs(int(delta))


def jitter_bounds(onset: int, n_samples: int, chirp_length: int,
                  length: int = CLIP_LENGTH) -> tuple[int, int]:
    """Admissible shifts keeping the whole chirp inside the window and the
    window inside the recording."""
    lo = max(chirp_length - length, -onset)
    hi = min(0, n_samples - length - onset)
    if lo > hi:
        raise ValueError("recording too short to cut a window around the chirp")
    return lo, hi


def jitter_window(recording, onset: int, rng: np.random.Generator,
                  chirp_length: int = int(round(CHIRP_DURATION * SAMPLE_RATE))) -> BinauralClip:
    """Cut a window whose start is moved by a random shift of up to 30%.

    The raw shift comes from :func:`draw_jitter`.  A positive shift would cut
    off the start of the chirp, so it is mirrored to ``-|shift|`` (the window
    moves earlier and the chirp lands at sample ``|shift|``), then clamped to
    :func:`jitter_bounds` for recordings too short to allow it.
    """
    rec = _as_two_channel(recording)
    delta = fold_jitter(draw_jitter(rng))
    lo, hi = jitter_bounds(onset, rec.shape[1], chirp_length)
    delta = min(max(delta, lo), hi)
    clip = extract_window(rec, onset + delta)
    clip.onset_index = int(onset)
    clip.shift = delta
    return clip


def jitter_stored_clips(clips: np.ndarray, rng: np.random.Generator,
                        chirp_length: int = int(round(CHIRP_DURATION * SAMPLE_RATE))) -> np.ndarray:
    """Batched jitter for windows already cut at the chirp onset.

    ``clips`` is ``(batch, 2, CLIP_LENGTH)``.  Each clip is treated as a
    recording preceded by ``MAX_JITTER`` samples of silence, which is what
    :func:`jitter_window` sees when the chirp sits at the clip start.
    """
    clips = np.asarray(clips)
    out = np.zeros_like(clips)
    deltas = fold_jitter(draw_jitter(rng, size=clips.shape[0]))
    lo = chirp_length - CLIP_LENGTH
    for i, d in enumerate(deltas):
        d = int(min(max(d, lo), 0))
        if d == 0:
            out[i] = clips[i]
        else:
            out[i, :, -d:] = clips[i, :, :CLIP_LENGTH + d]
    return out


def _hann(n: int) -> np.ndarray:
    # periodic Hann, as used for spectral analysis windows
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def _analysis_window() -> np.ndarray:
    w = np.zeros(FFT_SIZE)
    left = (FFT_SIZE - WINDOW_LENGTH) // 2
    w[left:left + WINDOW_LENGTH] = _hann(WINDOW_LENGTH)
    return w


def stft_magnitude(x: np.ndarray, log_magnitude: bool = False) -> np.ndarray:
    """STFT magnitude along the last axis of ``x``.

    Frames are centred on ``HOP_LENGTH * t`` for ``t < N_FRAMES`` with
    reflection padding; a 64-sample Hann window is zero-padded to the
    512-point FFT.  Returns ``x.shape[:-1] + (257, 200)`` for 3200-sample
    input.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    n_frames = -(-n // HOP_LENGTH)
    pad = FFT_SIZE // 2
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    xp = np.pad(x, widths, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(xp, FFT_SIZE, axis=-1)
    frames = frames[..., :n_frames * HOP_LENGTH:HOP_LENGTH, :]
    spec = np.abs(np.fft.rfft(frames * _analysis_window(), axis=-1))
    spec = np.swapaxes(spec, -1, -2)
    if log_magnitude:
        spec = np.log1p(spec)
    return spec


def compute_spectrogram(clip, log_magnitude: bool = False) -> np.ndarray:
    """``(2, 257, 200)`` magnitude spectrogram of a binaural clip."""
    data = clip.data if isinstance(clip, BinauralClip) else np.asarray(clip)
    if data.shape != (2, CLIP_LENGTH):
        raise ValueError(f"expected a (2, {CLIP_LENGTH}) clip, got {data.shape}")
    return stft_magnitude(data, log_magnitude=log_magnitude)


def normalize_depth(raw, valid=None, max_range=MAX_RANGE_M) -> np.ndarray:
    """Clip metric depth at ``max_range`` and scale to [0, 1]; invalid -> 0."""
    raw = np.asarray(raw, dtype=np.float64)
    if valid is None:
        valid = np.isfinite(raw)
    valid = np.asarray(valid, dtype=bool)
    if np.any(raw[valid] < 0):
        raise ValueError("negative depth values")
    out = np.zeros(raw.shape)
    out[valid] = np.minimum(raw[valid], max_range) / max_range
    return out
