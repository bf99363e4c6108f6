"""Paired sample generation: random room -> (binaural clip, depth, gray)."""
import logging

import numpy as np

from .acoustics import DEFAULT_SNR_DB, add_noise, render_clean, trace_image_sources
from .camera import render_views
from .dataset import (DEFAULT_SPLIT_COUNTS, SPLITS, DatasetWriter, SampleRecord,
                      split_seed_range)
from .preprocess import CLIP_LENGTH, extract_window, locate_chirp_onset, synthesize_chirp
from .scene import RoomScene, random_scene

log = logging.getLogger(__name__)

DEFAULT_MAX_ORDER = 3
PRE_ROLL = (100, 600)   # samples of noise before the chirp leaves the speaker
POST_ROLL = 400


def record(scene: RoomScene, chirp=None, max_order=DEFAULT_MAX_ORDER, snr_db=DEFAULT_SNR_DB):
    """Simulate a raw two-channel recording with the chirp emitted after a
    random pre-roll.  Returns ``(recording, emission_index)``."""
    chirp = synthesize_chirp() if chirp is None else chirp
    rng = np.random.default_rng(scene.rng_seed)
    emission = int(rng.integers(*PRE_ROLL))
    n = emission + CLIP_LENGTH + POST_ROLL
    paths = trace_image_sources(scene, max_order)
    clean = render_clean(paths, chirp, n, forward=scene.forward, right=scene.right,
                         emission_index=emission)
    if snr_db is None or np.isinf(snr_db):
        noisy = clean
    else:
        # SNR is referred to the window that will be cut from the recording
        power = float(np.mean(clean[:, emission:emission + CLIP_LENGTH] ** 2))
        sigma = np.sqrt(power / 10 ** (snr_db / 10))
        noisy = clean + rng.normal(0.0, sigma, size=clean.shape)
    return np.clip(noisy, -1.0, 1.0), emission


def simulate_sample(seed: int, split: str, resolution: int = 64, max_order=DEFAULT_MAX_ORDER,
                    snr_db=DEFAULT_SNR_DB, chirp=None) -> SampleRecord:
    chirp = synthesize_chirp() if chirp is None else chirp
    scene = random_scene(seed)
    recording, _ = record(scene, chirp, max_order=max_order, snr_db=snr_db)
    onset = locate_chirp_onset(recording, chirp)
    onset = min(onset, recording.shape[1] - CLIP_LENGTH)
    clip = extract_window(recording, onset)
    clip.data = clip.data.astype(np.float32)
    depth, gray = render_views(scene, resolution)
    return SampleRecord(id=f"{seed:010d}", clip=clip, depth=depth, gray=gray,
                        scene_seed=seed, split=split, scene_text=scene.to_text())


def split_counts_for(n_total: int) -> dict:
    """Scale the default train/val/test proportions to ``n_total`` samples."""
    weights = np.array([DEFAULT_SPLIT_COUNTS[s] for s in SPLITS], float)
    raw = weights / weights.sum() * n_total
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts))[: n_total - counts.sum()]:
        counts[i] += 1
    return dict(zip(SPLITS, counts.tolist()))


def simulate_dataset(root, counts: dict | None = None, seed: int = 0, resolution: int = 64,
                     max_order=DEFAULT_MAX_ORDER, snr_db=DEFAULT_SNR_DB, force=False,
                     progress=None) -> dict:
    """Generate and write a dataset; split membership follows disjoint seed ranges."""
    counts = dict(DEFAULT_SPLIT_COUNTS if counts is None else counts)
    chirp = synthesize_chirp()
    writer = DatasetWriter(root, force=force)
    done = 0
    total = sum(counts.values())
    for split in SPLITS:
        seeds = split_seed_range(split, seed)
        for i in range(counts.get(split, 0)):
            writer.add(simulate_sample(seeds[i], split, resolution, max_order, snr_db, chirp))
            done += 1
            if progress is not None:
                progress(done, total)
        log.info("simulated %d %s samples", counts.get(split, 0), split)
    return writer.close()
