"""Image-source echoes and binaural rendering.

Shoebox walls are handled with the lattice form of the image-source method:
along an axis of length ``L`` the image with index ``n`` sits at
``n*L + p`` (``n`` even) or ``n*L + L - p`` (``n`` odd) and has bounced
``|n|`` times off that pair of walls.  Boxes add first-order specular
reflections only.  Obstacles do not occlude paths.
"""
from dataclasses import dataclass
from itertools import product

import numpy as np

from . import kernels
from .preprocess import BinauralClip, CLIP_LENGTH, SAMPLE_RATE
from .scene import RoomScene

SPEED_OF_SOUND = 343.0
MAX_ORDER_LIMIT = 6
DEFAULT_SNR_DB = 30.0
# Output scale: a path of amplitude a is rendered at a * REFERENCE_GAIN,
# i.e. a source 0.1 m away arrives at unit level before the pinna gain.
REFERENCE_GAIN = 0.1
# Length of the truncated one-pole tail appended to every rendered chirp.
# At the lowest cutoff (4 kHz) the response has decayed by ~1e-8 after 32
# samples.
FILTER_TAIL = 32
CUTOFF_FRONT_HZ = 20000.0
CUTOFF_REAR_HZ = 4000.0


@dataclass(frozen=True)
class EchoPath:
    path_length: float
    reflection_count: int
    arrival_direction: tuple  # unit vector from the receiver toward the (image) source
    amplitude: float
    receiver: str  # "left" | "right"

    def delay(self, c: float = SPEED_OF_SOUND) -> float:
        return self.path_length / c


def _lattice(room_size, max_order):
    for n in product(range(-max_order, max_order + 1), repeat=3):
        if sum(abs(k) for k in n) <= max_order:
            yield n


def wall_image_sources(scene: RoomScene, max_order: int):
    """``(position, reflection_count)`` for every shoebox image up to ``max_order``."""
    size = np.asarray(scene.room_size, float)
    src = np.asarray(scene.emitter, float)
    images = []
    for n in _lattice(size, max_order):
        n = np.asarray(n)
        odd = n % 2 != 0
        pos = n * size + np.where(odd, size - src, src)
        images.append((pos, int(np.abs(n).sum())))
    return images


def box_face_reflections(scene: RoomScene, receiver):
    """First-order specular images off obstacle faces valid for ``receiver``.

    A face counts when the emitter and the receiver are both on its outer
    side and the specular point lies on the face rectangle.
    """
    src = np.asarray(scene.emitter, float)
    rec = np.asarray(receiver, float)
    out = []
    for box in scene.obstacles:
        lo, hi = box.lo, box.hi
        for axis in range(3):
            for coord, outward in ((lo[axis], -1.0), (hi[axis], 1.0)):
                if outward * (src[axis] - coord) <= 0 or outward * (rec[axis] - coord) <= 0:
                    continue
                image = src.copy()
                image[axis] = 2 * coord - src[axis]
                t = (coord - rec[axis]) / (image[axis] - rec[axis])
                q = rec + t * (image - rec)
                others = [a for a in range(3) if a != axis]
                if all(lo[a] <= q[a] <= hi[a] for a in others):
                    out.append((image, box.absorption))
    return out


def trace_image_sources(scene: RoomScene, max_order: int) -> list:
    """All echo paths with at most ``max_order`` reflections, per receiver.

    Amplitude is ``prod(1 - absorption) / path_length``.  A receiver placed
    exactly at the emitter has no direct path (zero length) and that path is
    skipped.
    """
    if not 0 <= max_order <= MAX_ORDER_LIMIT:
        raise ValueError(f"max_order must be in [0, {MAX_ORDER_LIMIT}], got {max_order}")
    scene.validate()
    keep = 1.0 - scene.wall_absorption
    images = wall_image_sources(scene, max_order)
    paths = []
    for name, rec in scene.receivers().items():
        candidates = [(pos, order, keep ** order) for pos, order in images]
        if max_order >= 1:
            candidates += [(pos, 1, 1.0 - a) for pos, a in box_face_reflections(scene, rec)]
        for pos, order, factor in candidates:
            v = pos - rec
            length = float(np.linalg.norm(v))
            if length == 0.0:
                continue
            paths.append(EchoPath(length, order, tuple(v / length), factor / length, name))
    return paths


def pinna_response(direction, ear_axis, forward):
    """Direction-dependent ear model: ``(gain, low-pass cutoff in Hz)``.

    Gain is ``0.5 + 0.5*max(0, cos)`` against the ear's outward axis; the
    cutoff slides linearly in the cosine against ``forward`` from 4 kHz
    (from behind) to 20 kHz (from the front).
    """
    d = np.asarray(direction, float)
    gain = 0.5 + 0.5 * max(0.0, float(np.dot(d, ear_axis)))
    cos_front = float(np.dot(d, forward))
    cutoff = CUTOFF_REAR_HZ + (CUTOFF_FRONT_HZ - CUTOFF_REAR_HZ) * 0.5 * (1.0 + cos_front)
    return gain, cutoff


def lowpass_alpha(cutoff, sample_rate=SAMPLE_RATE):
    return 1.0 - np.exp(-2 * np.pi * cutoff / sample_rate)


def _ear_templates(paths, chirp, forward, right, sample_rate):
    chirp = np.asarray(chirp, float)
    padded = np.concatenate([chirp, np.zeros(FILTER_TAIL)])
    forward = np.asarray(forward, float)
    right = np.asarray(right, float)
    templates = np.empty((len(paths), padded.size))
    for i, p in enumerate(paths):
        axis = -right if p.receiver == "left" else right
        gain, cutoff = pinna_response(p.arrival_direction, axis, forward)
        templates[i] = gain * kernels.one_pole_lowpass(padded, lowpass_alpha(cutoff, sample_rate))
    return templates


def render_clean(paths, chirp, n_samples, *, forward=(1.0, 0.0, 0.0), right=(0.0, -1.0, 0.0),
                 sample_rate=SAMPLE_RATE, emission_index=0, gain=REFERENCE_GAIN,
                 c=SPEED_OF_SOUND) -> np.ndarray:
    """Noise-free ``(2, n_samples)`` rendering; the chirp leaves the speaker
    at ``emission_index``.  Paths arriving after the end are dropped."""
    out = np.zeros((2, n_samples))
    for ch, name in enumerate(("left", "right")):
        sel = [p for p in paths if p.receiver == name]
        if not sel:
            continue
        delays = np.array([emission_index + p.path_length / c * sample_rate for p in sel])
        inside = delays < n_samples
        sel = [p for p, ok in zip(sel, inside) if ok]
        if not sel:
            continue
        templates = _ear_templates(sel, chirp, forward, right, sample_rate)
        amps = np.array([p.amplitude * gain for p in sel])
        kernels.scatter_paths(out[ch], templates, delays[inside], amps)
    return out


def add_noise(x, snr_db, rng: np.random.Generator) -> np.ndarray:
    """White Gaussian noise at ``snr_db`` relative to the mean power of ``x``."""
    if snr_db is None or np.isinf(snr_db):
        return x
    power = float(np.mean(x ** 2))
    sigma = np.sqrt(power / 10 ** (snr_db / 10))
    return x + rng.normal(0.0, sigma, size=x.shape)


def render_binaural_echo(paths, chirp, sample_rate=SAMPLE_RATE, *, forward=(1.0, 0.0, 0.0),
                         right=(0.0, -1.0, 0.0), snr_db=DEFAULT_SNR_DB, seed=0,
                         gain=REFERENCE_GAIN, c=SPEED_OF_SOUND) -> BinauralClip:
    """Render paths into a 3200-sample window that starts at chirp emission.

    Each path adds the pinna-filtered chirp delayed by ``path_length / c``
    (linear-interpolated fractional delay) and scaled by its amplitude.
    The result is clipped to [-1, 1].
    """
    if sample_rate != SAMPLE_RATE:
        raise ValueError(f"sample_rate must be {SAMPLE_RATE}")
    if not paths:
        raise ValueError("no echo paths to render")
    limit = CLIP_LENGTH / sample_rate
    late = [p for p in paths if p.path_length / c >= limit]
    if late:
        raise ValueError(f"{len(late)} path(s) arrive after the {CLIP_LENGTH}-sample window")
    x = render_clean(paths, chirp, CLIP_LENGTH, forward=forward, right=right,
                     sample_rate=sample_rate, gain=gain, c=c)
    x = add_noise(x, snr_db, np.random.default_rng(seed))
    return BinauralClip(np.clip(x, -1.0, 1.0), onset_index=0)


def max_window_range(n_samples=CLIP_LENGTH, sample_rate=SAMPLE_RATE, c=SPEED_OF_SOUND):
    """One-way distance whose round trip still fits in the window."""
    return n_samples / sample_rate * c / 2
