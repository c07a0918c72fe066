import csv
import json

import numpy as np
import pytest

from xwin import fileio
from xwin.cli import main

SMALL_SETS = [
    "--set", "data.grid_n=32", "--set", "data.grid_spacing_mm=8.0",
    "--set", "geom.nu=32", "--set", "geom.nv=32", "--set", "geom.pitch_mm=8.0",
    "--set", "model.image_size=32", "--set", "model.patch_size=8",
    "--set", "model.embed_dim=32", "--set", "model.encoder_depth=2",
    "--set", "model.num_heads=2", "--set", "model.predictor_dim=16",
    "--set", "data.n_phantoms=3", "--set", "data.n_real=3",
    "--set", "train.batch_volumes=2", "--set", "train.batch_real=2",
    "--set", "train.epochs=1", "--set", "train.iters_per_epoch=4",
]


def test_phantom_and_render_roundtrip(tmp_path):
    ph_dir = tmp_path / "ph"
    main(["phantom", "--out", str(ph_dir), "--count", "2", *SMALL_SETS])
    index = json.loads((ph_dir / "labels.json").read_text())
    assert len(index) == 2
    assert set(index[0]["labels"]) == {"lesion_present", "multi_lesion",
                                       "largest_lesion_left"}
    vol = fileio.load_volume(ph_dir / index[0]["file"])
    assert vol.nx == 32

    views = tmp_path / "views"
    main(["render", "--volume", str(ph_dir / index[0]["file"]), "--out", str(views),
          "--views", "2", "--delta-phi", "3", "--base", "lateral", *SMALL_SETS])
    files = sorted(views.glob("*.xwp"))
    assert len(files) == 2
    img = fileio.load_projection(files[0])
    assert img.nu == 32
    assert "beta+0090.00" in files[0].name  # lateral base pose


def test_train_probe_and_checkpoint(tmp_path):
    out = tmp_path / "run"
    main(["train", "--out", str(out), "--steps", "4", *SMALL_SETS])
    assert (out / "checkpoint.xwc").exists()
    rows = (out / "metrics.csv").read_text().strip().splitlines()
    assert len(rows) == 5
    assert rows[0].startswith("step,loss_total")

    probe_out = tmp_path / "probe.jsonl"
    main(["probe", "--checkpoint", str(out / "checkpoint.xwc"),
          "--per-class", "6", "--out", str(probe_out)])
    lines = [json.loads(l) for l in probe_out.read_text().splitlines()]
    tasks = {l["task"] for l in lines}
    assert "lesion_present" in tasks
    assert all(0.0 <= l["auroc"] <= 1.0 for l in lines)


def test_reconstruct_groundtruth_and_metrics(tmp_path):
    out_vol = tmp_path / "rec.xwv"
    metrics = tmp_path / "m.jsonl"
    main(["reconstruct", "--source", "groundtruth", "--views", "24",
          "--output", str(out_vol), "--det-n", "48", "--det-pitch", "8.0",
          "--metrics-out", str(metrics),
          "--set", "data.grid_n=32", "--set", "data.grid_spacing_mm=8.0"])
    rec = fileio.load_volume(out_vol)
    assert rec.nx == 32
    payload = json.loads(metrics.read_text().splitlines()[-1])
    assert payload["vol_psnr"] > 10.0

    main(["metrics", "--ref", str(out_vol), "--test", str(out_vol),
          "--out", str(tmp_path / "same.json")])
    same = json.loads((tmp_path / "same.json").read_text())
    assert same["psnr"] == 99.0 and same["ssim"] == pytest.approx(1.0)


def test_ablate_codebook_emits_table_shaped_csv(tmp_path):
    out = tmp_path / "codebook.csv"
    main(["ablate", "--what", "codebook", "--out", str(out),
          "--steps", "2", "--decoder-steps", "8", "--views", "12", *SMALL_SETS])
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert set(rows[0]) == {"size", "dim", "usage", "proj_psnr", "proj_ssim",
                            "vol_psnr", "vol_ssim"}
    combos = {(r["size"], r["dim"]) for r in rows}
    assert combos == {("1024", "128"), ("1024", "256"), ("2048", "128"), ("2048", "256")}
