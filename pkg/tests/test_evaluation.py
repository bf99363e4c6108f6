import hashlib
import json

import numpy as np
import pytest
import torch
from torch import nn

from echo2depth import cli
from echo2depth.dataset import load_split
from echo2depth.evaluation import (GUTTER, METRIC_FIELDS, EvaluationError, compose_panel,
                                   evaluate, export_figures, grid_cells, read_metrics,
                                   run_ablation_grid, write_metrics)
from echo2depth.models import ModelConfig, build_model, save_checkpoint
from echo2depth.simulate import simulate_dataset
from echo2depth.training import expected_random_l1


@pytest.fixture(scope="module")
def ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("evalds")
    simulate_dataset(root, {"train": 12, "val": 4, "test": 6}, seed=1, resolution=16)
    return root


class Oracle(nn.Module):
    """Looks up the cached target of each clip: a perfect predictor."""

    def __init__(self, split, cfg):
        super().__init__()
        self.cfg = cfg
        self.table = {a.tobytes(): d for a, d in zip(split.audio, split.depth)}

    def forward(self, x):
        return torch.from_numpy(np.stack([self.table[a.numpy().tobytes()] for a in x]))


def test_perfect_oracle_scores_zero(ds):
    test = load_split(ds, "test", 16)
    oracle = Oracle(test, ModelConfig(resolution=16))
    rows = evaluate((oracle, {"regime": "gen_only", "target": "depth"}), ds)
    assert rows[0]["l1"] == 0.0
    assert rows[0]["n_samples"] == 6
    assert [r["generator"] for r in rows[1:]] == ["mean", "noise"]


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_evaluate_is_read_only(ds, tmp_path):
    ckpt = tmp_path / "m.npz"
    save_checkpoint(ckpt, build_model(ModelConfig(resolution=16), seed=0), {"target": "depth"})
    before = (_digest(ds), ckpt.read_bytes())
    rows = evaluate(ckpt, ds)
    again = evaluate(ckpt, ds)
    assert rows == again
    assert (_digest(ds), ckpt.read_bytes()) == before
    assert set(rows[0]) == set(METRIC_FIELDS)


def test_noise_baseline_range_and_closed_form(ds):
    test = load_split(ds, "test", 16)
    oracle = Oracle(test, ModelConfig(resolution=16))
    noise = evaluate((oracle, {}), ds)[2]["l1"]
    assert 0.2 <= noise <= 0.45
    # |U - y| has std < 0.3 for any y in [0, 1]; 4 sigma over the pixel count
    bound = 4 * 0.3 / np.sqrt(test.depth.size)
    assert abs(noise - expected_random_l1(test.depth)) < bound


def test_resolution_mismatch(ds, tmp_path):
    ckpt = tmp_path / "m32.npz"
    save_checkpoint(ckpt, build_model(ModelConfig(resolution=32), seed=0))
    with pytest.raises(EvaluationError):
        evaluate(ckpt, ds)


def test_metrics_csv_round_trip(tmp_path):
    rows = [{"regime": "gen_only", "representation": "waveform", "fusion": "early",
             "generator": "direct", "resolution": 16, "target": "depth", "split": "test",
             "l1": 0.123456789, "n_samples": 10}]
    write_metrics(rows, tmp_path / "m.csv")
    text = (tmp_path / "m.csv").read_text().splitlines()
    assert text[0] == ",".join(METRIC_FIELDS)
    assert text[1] == "gen_only,waveform,early,direct,16,depth,test,0.12345679,10"
    assert read_metrics(tmp_path / "m.csv")[0]["l1"] == pytest.approx(0.12345679)


def test_grid_layouts():
    t4 = grid_cells("encoders")
    assert len(t4) == 8
    assert {c["generator"] for c in t4} == {"unet", "direct"}
    t5 = grid_cells("targets", (32, 64, 128))
    assert len(t5) == 2 * 3 * 3
    assert {(c["regime"], c["target"]) for c in t5} == {("gen_only", "depth"), ("gan", "depth"),
                                                        ("gan", "gray")}
    with pytest.raises(ValueError):
        grid_cells("table9")


def test_ablation_grid_rows(ds, tmp_path):
    rows = run_ablation_grid({"layout": "encoders", "epochs": "1", "batch_size": "4"}, ds,
                             tmp_path / "grid")
    assert len(rows) == 10
    assert [r["regime"] for r in rows[-2:]] == ["baseline", "baseline"]
    noise = rows[-1]["l1"]
    assert all(np.isfinite(r["l1"]) and r["l1"] < noise for r in rows[:-1])
    assert len(read_metrics(tmp_path / "grid" / "metrics.csv")) == 10


def test_targets_layout_shape(ds, tmp_path):
    # structure only: 2 models x 1 resolution x 3 runs + baselines per target
    rows = run_ablation_grid({"layout": "targets", "resolutions": "16", "epochs": "1",
                              "max_steps": "1", "batch_size": "4"}, ds)
    model_rows = [r for r in rows if r["regime"] != "baseline"]
    assert len(model_rows) == 6
    assert len(rows) == 6 + 4


def test_panel_geometry():
    imgs = [[np.full((16, 16), 0.5)] * 4 for _ in range(3)]
    panel = compose_panel(imgs)
    assert panel.shape == (3 * 16 + 4 * GUTTER, 4 * 16 + 5 * GUTTER)
    assert panel[0, 0] == 1.0 and panel[GUTTER, GUTTER] == 0.5


def test_export_figures(ds, tmp_path):
    ckpt = tmp_path / "d.npz"
    save_checkpoint(ckpt, build_model(ModelConfig(resolution=16), seed=0))
    test = load_split(ds, "test", 16)
    from echo2depth.dataset import SplitArrays

    four = SplitArrays(test.audio[:4], test.depth[:4], test.gray[:4], test.seeds[:4],
                       test.ids[:4])
    a = export_figures(ckpt, four, tmp_path / "a", gray_checkpoint=ckpt)
    b = export_figures(ckpt, four, tmp_path / "b", gray_checkpoint=ckpt)
    assert [p.name for p in a] == ["panel.pgm", "panel.png"]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
    from PIL import Image

    img = Image.open(a[1])
    assert img.size == (4 * 16 + 5 * GUTTER, 4 * 16 + 5 * GUTTER)


# -- command line -------------------------------------------------------------

def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    assert cli.main(["simulate", "--scenes", "10", "--out", str(data), "--seed", "2",
                     "--resolution", "16"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["counts"] == {"train": 8, "val": 1, "test": 1}
    cfg = tmp_path / "train.cfg"
    cfg.write_text("regime = gen_only\nepochs = 1\nbatch_size = 4\n")
    assert cli.main(["train", "--config", str(cfg), "--data", str(data),
                     "--out", str(tmp_path / "run")]) == 0
    ckpt = json.loads(capsys.readouterr().out)["checkpoint"]
    assert cli.main(["eval", "--ckpt", ckpt, "--data", str(data),
                     "--out", str(tmp_path / "m.csv")]) == 0
    assert len(read_metrics(tmp_path / "m.csv")) == 3
    assert cli.main(["export-figures", "--ckpt", ckpt, "--data", str(data), "-n", "1",
                     "--out", str(tmp_path / "fig")]) == 0
    assert (tmp_path / "fig" / "panel.png").exists()


def test_cli_error_line(tmp_path, capsys):
    code = cli.main(["eval", "--ckpt", str(tmp_path / "missing.npz"), "--data", str(tmp_path)])
    assert code != 0
    last = capsys.readouterr().err.strip().splitlines()[-1]
    assert last.startswith("error: ")
    payload = json.loads(last[len("error: "):])
    assert set(payload) == {"type", "message"}
