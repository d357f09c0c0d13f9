import json
from pathlib import Path

import numpy as np
import pytest

from icad.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from icad.cli import main
from icad.config import RunConfig, desk_config
from icad.data import load_directory, read_gray, write_gray
from icad.evaluate import evaluate_maps
from icad.network import build_network, desk_spec
from icad.optim import Adam
from icad.scoring import AnomalyMap, read_amap
from icad.tensor import Tensor
from icad.train import train_model

SMALL_SPEC = """\
n_train = 10
n_val = 2
n_test = 3
height = 208
width = 216
n_defects_min = 1
n_defects_max = 2
"""


def _files(root: Path):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    spec = root / "spec.txt"
    spec.write_text(SMALL_SPEC)
    assert main(["synth", str(spec), str(root / "data"), "--seed", "5"]) == 0
    return root / "data", spec


def test_synth_counts_and_masks(dataset):
    data, _ = dataset
    assert len(list((data / "train").glob("*.png"))) == 10
    assert len(list((data / "val").glob("*.png"))) == 2
    masks = sorted((data / "test").glob("*_mask.png"))
    assert len(masks) == 3 and all(read_gray(m).any() for m in masks)
    assert not list((data / "train").glob("*_mask.png"))


def test_synth_is_byte_identical_per_seed(dataset, tmp_path):
    data, spec = dataset
    assert main(["synth", str(spec), str(tmp_path / "again"), "--seed", "5"]) == 0
    assert _files(data) == _files(tmp_path / "again")
    assert main(["synth", str(spec), str(tmp_path / "other"), "--seed", "6"]) == 0
    assert _files(data) != _files(tmp_path / "other")


def test_synth_without_defects_writes_empty_masks(tmp_path):
    spec = tmp_path / "spec.txt"
    spec.write_text("n_train = 1\nn_val = 1\nn_test = 2\nheight = 128\nwidth = 128\nn_defects_min = 0\nn_defects_max = 0\n")
    assert main(["synth", str(spec), str(tmp_path / "d")]) == 0
    masks = sorted((tmp_path / "d" / "test").glob("*_mask.png"))
    assert len(masks) == 2 and not any(read_gray(m).any() for m in masks)


def test_synth_refuses_non_empty_directory(dataset, tmp_path):
    _, spec = dataset
    out = tmp_path / "busy"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert main(["synth", str(spec), str(out)]) == 3
    assert [p.name for p in out.iterdir()] == ["keep.txt"]
    assert main(["synth", str(spec), str(out), "--force"]) == 0


def test_synth_rejects_bad_spec(tmp_path):
    spec = tmp_path / "spec.txt"
    spec.write_text("colour = red\n")
    assert main(["synth", str(spec), str(tmp_path / "d")]) == 2
    spec.write_text("period = 1\n")
    assert main(["synth", str(spec), str(tmp_path / "d")]) == 2


def _train_args(data, out, *extra):
    return [
        "train", "--profile", "desk",
        "--train-dir", str(data / "train"), "--val-dir", str(data / "val"),
        "--output-dir", str(out), *extra,
    ]


def test_zero_batches_checkpoints_initialisation(dataset, tmp_path):
    data, _ = dataset
    out = tmp_path / "run"
    assert main(_train_args(data, out, "--batches", "0")) == 0
    model, config, _ = load_checkpoint(out / "ckpt_000000.icad")
    assert config.batches == 0 and config.model == "desk"
    ref = build_network(desk_spec(), _init_rng(config.seed), config.init_sigma)
    for name in ref.param_names:
        np.testing.assert_array_equal(model.params[name].data, ref.params[name].data)
    assert RunConfig.load(out / "config.txt") == config


def _init_rng(seed):
    from icad.data import split_seeds

    return split_seeds(seed, 3)[0]


def test_training_is_deterministic(dataset, tmp_path, monkeypatch):
    data, _ = dataset
    args = ("--batches", "3", "--batch-size", "2", "--val-every", "2", "--val-patches", "2", "--checkpoint-every", "2")
    # same relative output_dir so the embedded configs match too
    for root in ("a", "b"):
        monkeypatch.setenv("ICAD_OUTPUT_ROOT", str(tmp_path / root))
        assert main(_train_args(data, "run", *args)) == 0
    a, b = tmp_path / "a" / "run", tmp_path / "b" / "run"
    assert (a / "loss_log.csv").read_text() == (b / "loss_log.csv").read_text()
    assert len((a / "loss_log.csv").read_text().splitlines()) == 4
    for name in ("ckpt_000002.icad", "last.icad", "best.icad"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert (a / "loss.png").exists()


def test_config_file_and_flags(dataset, tmp_path):
    data, _ = dataset
    cfg = tmp_path / "run.txt"
    desk_config(batches=0, seed=9, output_dir=str(tmp_path / "from_file")).save(cfg)
    assert main(["train", "--config", str(cfg), "--train-dir", str(data / "train")]) == 0
    saved = RunConfig.load(tmp_path / "from_file" / "config.txt")
    assert saved.seed == 9 and saved.model == "desk" and saved.train_dir == str(data / "train")


def test_output_root_environment(dataset, tmp_path, monkeypatch):
    data, _ = dataset
    monkeypatch.setenv("ICAD_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(_train_args(data, "rel", "--batches", "0")) == 0
    assert (tmp_path / "root" / "rel" / "ckpt_000000.icad").exists()


def test_train_errors(dataset, tmp_path):
    data, _ = dataset
    assert main(_train_args(data, tmp_path / "x", "--batches", "-1")) == 2
    assert main(_train_args(data, tmp_path / "x", "--model", "resnet")) == 2
    assert main(_train_args(tmp_path / "missing", tmp_path / "x", "--batches", "0")) == 3
    bad = tmp_path / "bad.txt"
    bad.write_text("nonsense line\n")
    assert main(["train", "--config", str(bad)]) == 2


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    data, _ = dataset
    out = tmp_path_factory.mktemp("ckpt")
    assert main(_train_args(data, out, "--batches", "0", "--init-sigma", "0.1")) == 0
    return out / "ckpt_000000.icad"


def test_eval_writes_reports(dataset, checkpoint, tmp_path):
    data, _ = dataset
    out = tmp_path / "eval"
    assert main(["eval", str(checkpoint), str(data / "test"), "--out", str(out)]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert 0 <= metrics["auroc"] <= 1 and metrics["images"] == 3
    assert (out / "roc.csv").read_text().startswith("threshold,fpr,tpr")
    assert (out / "pr.csv").read_text().startswith("threshold,recall,precision")
    assert len(list((out / "maps").glob("*.amap"))) == 3
    assert (out / "curves.png").exists() and len(list((out / "figures").glob("*.png"))) == 3
    assert (out / "config.txt").exists()


def test_eval_warns_about_missing_masks(dataset, checkpoint, tmp_path):
    data, _ = dataset
    test = tmp_path / "test"
    test.mkdir()
    for p in sorted((data / "test").iterdir()):
        (test / p.name).write_bytes(p.read_bytes())
    (test / "test_0000_mask.png").unlink()
    out = tmp_path / "eval"
    assert main(["eval", str(checkpoint), str(test), "--out", str(out), "--no-figures"]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["images"] == 2 and any("test_0000" in w for w in metrics["warnings"])
    assert not (out / "curves.png").exists()


def test_eval_errors(checkpoint, tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["eval", str(checkpoint), str(tmp_path / "empty")]) == 3
    (tmp_path / "junk.icad").write_bytes(b"nope")
    assert main(["eval", str(tmp_path / "junk.icad"), str(tmp_path / "empty")]) == 2


def test_oracle_scores_give_perfect_auroc(dataset):
    data, _ = dataset
    images, _ = load_directory(data / "test", with_masks=True)
    maps = []
    for im in images:
        scores = np.full(im.shape, np.nan, np.float32)
        scores[8:-8, 8:-8] = im.labels[8:-8, 8:-8]
        maps.append(AnomalyMap(scores, np.ones(im.shape, int), 1.0, 1))
    ev = evaluate_maps(maps, images, figures=False)
    assert ev.summary["auroc"] == 1.0 and ev.summary["auprc"] == 1.0


def test_random_scores_give_chance_auroc(dataset):
    data, _ = dataset
    images, _ = load_directory(data / "test", with_masks=True)
    rng = np.random.default_rng(0)
    maps = [AnomalyMap(rng.random(im.shape).astype(np.float32), np.ones(im.shape, int), 1.0, 1) for im in images]
    ev = evaluate_maps(maps, images, figures=False)
    assert ev.summary["positives"] + ev.summary["negatives"] >= 80_000
    assert 0.45 <= ev.summary["auroc"] <= 0.55


def test_random_scores_chance_auroc_large():
    rng = np.random.default_rng(1)
    labels = np.zeros((400, 400), np.uint8)
    labels[100:140, 200:260] = 1
    from icad.data import SurfaceImage

    im = SurfaceImage(np.zeros(labels.shape, np.float32), labels)
    m = AnomalyMap(rng.random(labels.shape).astype(np.float32), np.ones(labels.shape, int), 1.0, 1)
    ev = evaluate_maps([m], [im], figures=False)
    assert ev.summary["positives"] + ev.summary["negatives"] >= 100_000
    assert 0.45 <= ev.summary["auroc"] <= 0.55


def test_infer_single_window(checkpoint, tmp_path):
    img = np.random.default_rng(2).integers(0, 256, (128, 128), dtype=np.uint8)
    write_gray(tmp_path / "x.png", img)
    for run in ("a", "b"):
        assert main(["infer", str(checkpoint), str(tmp_path / "x.png"), "--out", str(tmp_path / run), "--figure"]) == 0
    a, b = (tmp_path / "a" / "x.amap").read_bytes(), (tmp_path / "b" / "x.amap").read_bytes()
    assert a == b
    scores = read_amap(tmp_path / "a" / "x.amap")
    scored = np.argwhere(~np.isnan(scores))
    assert len(scored) == 576
    assert scored.min(axis=0).tolist() == [52, 52] and scored.max(axis=0).tolist() == [75, 75]
    png = read_gray(tmp_path / "a" / "x.png")
    block = scores[52:76, 52:76]
    assert png[52:76, 52:76].max() == 255 and png[52:76, 52:76].min() == 0
    assert png[np.unravel_index(np.nanargmax(scores), scores.shape)] == 255
    assert png[np.unravel_index(np.nanargmin(scores), scores.shape)] == 0
    assert block.max() > block.min()
    assert (tmp_path / "a" / "x_panel.png").exists()


def test_infer_rejects_small_image(checkpoint, tmp_path):
    write_gray(tmp_path / "s.png", np.zeros((100, 200), np.uint8))
    assert main(["infer", str(checkpoint), str(tmp_path / "s.png"), "--out", str(tmp_path / "o")]) == 3


@pytest.mark.parametrize("kind", ["desk", "autoencoder"])
def test_checkpoint_round_trip_is_bitwise(tmp_path, kind):
    cfg = desk_config(model=kind, batches=2, batch_size=2, seed=4)
    data = np.random.default_rng(5).uniform(-1, 1, (3, 128, 128)).astype(np.float32)
    result = train_model(data, cfg)
    path = tmp_path / "m.icad"
    save_checkpoint(path, result.model, cfg, result.optimizer)
    model, config, opt = load_checkpoint(path)
    assert config == cfg and opt["t"] == 2
    x = np.random.default_rng(6).uniform(-1, 1, (2, 1, 128, 128)).astype(np.float32)
    np.testing.assert_array_equal(model.reconstruct(x), result.model.reconstruct(x))
    assert model.reconstruct(x).tobytes() == result.model.reconstruct(x).tobytes()
    # optimizer moments survive so training can resume
    resumed = Adam(model.parameters())
    resumed.load_state_arrays(model.param_names, opt["arrays"], opt["t"])
    for m0, m1 in zip(result.optimizer.state.m, resumed.state.m):
        np.testing.assert_array_equal(m0, m1)
    save_checkpoint(tmp_path / "again.icad", model, config, resumed)
    assert (tmp_path / "again.icad").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_corruption(tmp_path):
    net = build_network(desk_spec(), np.random.default_rng(0))
    path = tmp_path / "m.icad"
    save_checkpoint(path, net)
    raw = path.read_bytes()
    (tmp_path / "t.icad").write_bytes(raw[:-4])
    (tmp_path / "x.icad").write_bytes(raw + b"\0")
    (tmp_path / "v.icad").write_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])
    for name in ("t", "x", "v"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / f"{name}.icad")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.icad")
    assert raw[:4] == b"ICAD"
    model, config, opt = load_checkpoint(path)
    assert config is None and opt is None
    x = Tensor(np.zeros((1, 1, 128, 128), np.float32))
    assert not model(x).data.any()
