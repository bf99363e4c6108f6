"""Test-set metrics, ablation grids and prediction panels."""
import csv
import logging
from pathlib import Path

import numpy as np

from .dataset import load_split, read_manifest
from .models import load_checkpoint
from .training import (TrainConfig, baseline_mean_depth, baseline_random, mean_l1, predict,
                       train)

log = logging.getLogger(__name__)

METRIC_FIELDS = ("regime", "representation", "fusion", "generator", "resolution", "target",
                 "split", "l1", "n_samples")
BASELINE_SEED = 12345


class EvaluationError(RuntimeError):
    pass


def _representation_label(cfg) -> str:
    if cfg.representation == "spectrogram":
        return f"spectrogram_f{cfg.spec_freq}"
    return cfg.representation


def model_row(cfg, regime, target, split, l1, n) -> dict:
    return {"regime": regime, "representation": _representation_label(cfg), "fusion": cfg.fusion,
            "generator": cfg.generator, "resolution": cfg.resolution, "target": target,
            "split": split, "l1": l1, "n_samples": n}


def baseline_rows(train_targets, test_targets, resolution, target, split,
                  seed=BASELINE_SEED) -> list:
    """Mean-image and uniform-noise rows, both scored on ``test_targets``."""
    n = len(test_targets)
    mean_img = baseline_mean_depth(train_targets)
    mean = mean_l1(np.broadcast_to(mean_img, test_targets.shape), test_targets)
    noise = baseline_random(np.random.default_rng(seed), test_targets.shape)
    rand = mean_l1(noise, test_targets)
    common = {"fusion": "none", "resolution": resolution, "target": target, "split": split,
              "n_samples": n, "regime": "baseline", "representation": "none"}
    return [dict(common, generator="mean", l1=mean), dict(common, generator="noise", l1=rand)]


def _splits(data_root, resolution, splits, cache):
    cache = {} if cache is None else cache
    for s in splits:
        key = (s, resolution)
        if key not in cache:
            cache[key] = load_split(data_root, s, resolution)
    return cache


def evaluate(checkpoint, data_root, split="test", with_baselines=True, cache=None) -> list:
    """Mean L1 of a checkpoint on ``split`` (eval mode, no jitter).

    Returns metric rows: the model first, then the two baselines computed on
    the same split.  Nothing on disk is modified.
    """
    if isinstance(checkpoint, (str, Path)):
        model, meta = load_checkpoint(checkpoint)
    else:
        model, meta = checkpoint
    cfg = model.cfg
    manifest = read_manifest(data_root)
    if manifest["counts"].get(split, 0) == 0:
        raise EvaluationError(f"split {split!r} is empty or missing in {data_root}")
    if manifest["resolution"] < cfg.resolution or manifest["resolution"] % cfg.resolution:
        raise EvaluationError(f"checkpoint resolution {cfg.resolution} does not match dataset "
                              f"resolution {manifest['resolution']}")
    target = meta.get("target", "depth")
    regime = meta.get("regime", "gen_only")
    data = _splits(data_root, cfg.resolution, ("train", split) if with_baselines else (split,),
                   cache)
    test = data[(split, cfg.resolution)]
    pred = predict(model, test.audio, cfg)
    rows = [model_row(cfg, regime, target, split, mean_l1(pred, test.target(target)), len(test))]
    if with_baselines:
        rows += baseline_rows(data[("train", cfg.resolution)].target(target), test.target(target),
                              cfg.resolution, target, split)
    return rows


def write_metrics(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            out = dict(r)
            if isinstance(out["l1"], float):
                out["l1"] = f"{out['l1']:.8f}"
            w.writerow({k: out[k] for k in METRIC_FIELDS})


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["l1"] = float(r["l1"])
        r["resolution"] = int(r["resolution"])
        r["n_samples"] = int(r["n_samples"])
    return rows


# ---------------------------------------------------------------------------
# ablations

# the eight generator-only cells compared at 16x16
ENCODER_CELLS = (
    dict(representation="waveform", fusion="early", generator="unet"),
    dict(representation="waveform", fusion="early", generator="direct"),
    dict(representation="waveform", fusion="late", generator="unet"),
    dict(representation="waveform", fusion="late", generator="direct"),
    dict(representation="spectrogram", spec_freq=1, generator="unet"),
    dict(representation="spectrogram", spec_freq=1, generator="direct"),
    dict(representation="spectrogram", spec_freq=10, generator="unet"),
    dict(representation="spectrogram", spec_freq=10, generator="direct"),
)

# the two best cells, retrained at higher resolutions
TARGET_MODELS = (
    dict(representation="waveform", fusion="early", generator="direct"),
    dict(representation="spectrogram", spec_freq=10, generator="unet"),
)
TARGET_RUNS = (("gen_only", "depth"), ("gan", "depth"), ("gan", "gray"))


def grid_cells(layout="encoders", resolutions=(16,)):
    """``(cell overrides)`` for a named layout."""
    cells = []
    if layout == "encoders":
        for res in resolutions:
            for c in ENCODER_CELLS:
                cells.append(dict(c, resolution=res, regime="gen_only", target="depth"))
    elif layout == "targets":
        for m in TARGET_MODELS:
            for res in resolutions:
                for regime, target in TARGET_RUNS:
                    cells.append(dict(m, resolution=res, regime=regime, target=target))
    else:
        raise ValueError(f"unknown grid layout {layout!r}")
    return cells


def run_ablation_grid(grid: dict, data_root, out_dir=None, split="test") -> list:
    """Train and evaluate every cell of ``grid``; returns metric rows.

    ``grid`` keys: ``layout`` (encoders | targets), ``resolutions`` (list of
    ints) and any :class:`TrainConfig` field applied to every cell.
    Baseline rows are appended once per (resolution, target).
    """
    grid = dict(grid)
    layout = grid.pop("layout", "encoders")
    resolutions = grid.pop("resolutions", (16,))
    if isinstance(resolutions, str):
        resolutions = [int(r) for r in resolutions.replace(",", " ").split()]
    out_dir = Path(out_dir) if out_dir else None
    cache = {}
    rows, seen = [], set()
    for i, cell in enumerate(grid_cells(layout, resolutions)):
        cfg = TrainConfig.from_mapping({**grid, **cell})
        res = cfg.resolution
        data = _splits(data_root, res, ("train", "val", split), cache)
        cell_dir = out_dir / f"{i:02d}_{cfg.regime}_{cfg.target}_{cfg.model_config().label()}" \
            if out_dir else None
        log.info("grid cell %d: %s", i, cell)
        result = train(cfg, {"train": data[("train", res)], "val": data[("val", res)]}, cell_dir)
        test = data[(split, res)]
        pred = predict(result.model, test.audio, cfg)
        rows.append(model_row(cfg, cfg.regime, cfg.target, split,
                              mean_l1(pred, test.target(cfg.target)), len(test)))
        key = (res, cfg.target)
        if key not in seen:
            seen.add(key)
            rows.extend(baseline_rows(data[("train", res)].target(cfg.target),
                                      test.target(cfg.target), res, cfg.target, split))
    # baselines after the model rows, as in the comparison tables
    rows.sort(key=lambda r: r["regime"] == "baseline")
    if out_dir:
        write_metrics(rows, out_dir / "metrics.csv")
    return rows


# ---------------------------------------------------------------------------
# figures

GUTTER = 2
PANEL_COLUMNS = ("depth", "depth_pred", "gray", "gray_pred")


def compose_panel(rows_of_images, gutter=GUTTER) -> np.ndarray:
    """Tile equally sized images into one grid separated by white gutters."""
    n_rows = len(rows_of_images)
    n_cols = len(rows_of_images[0])
    res = rows_of_images[0][0].shape[0]
    h = n_rows * res + (n_rows + 1) * gutter
    w = n_cols * res + (n_cols + 1) * gutter
    canvas = np.ones((h, w))
    for i, row in enumerate(rows_of_images):
        for j, img in enumerate(row):
            y = gutter + i * (res + gutter)
            x = gutter + j * (res + gutter)
            canvas[y:y + res, x:x + res] = np.clip(img, 0, 1)
    return canvas


def write_pgm8(path, img):
    q = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + q.tobytes())


def export_figures(checkpoint, samples, out_dir, gray_checkpoint=None, name="panel",
                   formats=("pgm", "png")) -> list:
    """One panel with a row per sample: GT depth | predicted depth | GT gray | predicted gray.

    ``samples`` is a :class:`SplitArrays`.  Without ``gray_checkpoint`` the
    last column stays black.
    """
    model, _ = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    cfg = model.cfg
    from .dataset import downsample

    depth_gt = downsample(samples.depth, cfg.resolution)
    gray_gt = downsample(samples.gray, cfg.resolution)
    depth_pred = predict(model, samples.audio, cfg)
    if gray_checkpoint is not None:
        gmodel, _ = load_checkpoint(gray_checkpoint)
        if gmodel.cfg.resolution != cfg.resolution:
            raise EvaluationError("depth and gray checkpoints differ in resolution")
        gray_pred = predict(gmodel, samples.audio, gmodel.cfg)
    else:
        gray_pred = np.zeros_like(depth_pred)
    panel = compose_panel([[depth_gt[i], depth_pred[i], gray_gt[i], gray_pred[i]]
                           for i in range(len(samples))])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "pgm" in formats:
        p = out_dir / f"{name}.pgm"
        write_pgm8(p, panel)
        written.append(p)
    if "png" in formats:
        from PIL import Image

        p = out_dir / f"{name}.png"
        Image.fromarray(np.round(panel * 255).astype(np.uint8), mode="L").save(p, optimize=False)
        written.append(p)
    return written
