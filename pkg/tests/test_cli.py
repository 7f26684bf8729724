import csv
import json

import numpy as np
import pytest

from statn import cli, data_io
from statn import geometry as geo
from statn.data_io import load_model, parse_theta, read_ppm
from statn.pipeline import ModelConfig, StaTNModel
from statn.tensor_core import LayerSpec

SYNTH = {"image_dims": [16, 16, 3], "grid_dims": [3, 3], "true_dim": 1, "base_scale": 0.6,
         "t_max": 0.1, "clutter": 0.3, "samples": 12, "template_size": 12}
MODEL_FLAGS = ["--grid-dims", "3,3", "--high-dims", "6,6", "--shape-dim", "2", "--tex-dim", "2",
               "--hidden", "8"]


@pytest.fixture
def synth_json(tmp_path):
    path = tmp_path / "synth.json"
    path.write_text(json.dumps(SYNTH))
    return path


@pytest.fixture
def small_model_file(tmp_path):
    cfg = ModelConfig(image_dims=(16, 16, 3), grid_dims=(3, 3), high_dims=(6, 6), shape_dim=2,
                      tex_dim=2, localiser=[LayerSpec("fc", units=4), LayerSpec("relu")])
    path = tmp_path / "m.statn"
    data_io.save_model(StaTNModel(cfg), path)
    return path


@pytest.fixture
def image_file(tmp_path, rng):
    path = tmp_path / "img.ppm"
    data_io.write_ppm(path, rng.random((16, 16, 3)))
    return path


def files_under(root):
    return {p.relative_to(root).as_posix() for p in root.rglob("*") if p.is_file()}


def test_flags_mirror_train_config_fields():
    parser = cli.build_parser()
    args = parser.parse_args(["train", "--data", "x", "--out", "o", "--w-class", "2",
                              "--lr-texture", "0.3", "--augment", "--val-fraction", "0.2"])
    cfg = cli._train_config(args)
    assert cfg.w_class == 2 and cfg.lr_texture == 0.3 and cfg.augment and cfg.val_fraction == 0.2


def test_missing_dataset_is_usage_error(tmp_path, capsys):
    assert cli.main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2
    assert "not found" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_no_subcommand_is_usage_error():
    assert cli.main([]) == 2
    assert cli.main(["nonsense"]) == 2


def test_train_zero_steps_writes_initial_model(tmp_path, synth_json):
    out = tmp_path / "run"
    rc = cli.main(["train", "--synth-config", str(synth_json), "--out", str(out), "--steps", "0",
                   "--seed", "4"] + MODEL_FLAGS)
    assert rc == 0
    assert files_under(out) == {"model.statn", "log.csv"}
    model = load_model(out / "model.statn")
    fresh = StaTNModel(model.config)
    for name, p in fresh.named_params().items():
        assert np.array_equal(p.value, model.named_params()[name].value)


def test_train_is_deterministic_and_writes_log(tmp_path, synth_json):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        rc = cli.main(["train", "--synth-config", str(synth_json), "--out", str(out),
                       "--steps", "12", "--log-every", "4", "--batch-size", "4"] + MODEL_FLAGS)
        assert rc == 0
        outs.append(out)
    assert files_under(outs[0]) == {"model.statn", "log.csv", "curves.png"}
    a, b = ((o / "log.csv").read_text() for o in outs)
    assert a == b
    assert (outs[0] / "model.statn").read_text() == (outs[1] / "model.statn").read_text()
    rows = list(csv.DictReader(a.splitlines()))
    assert list(rows[0]) == ["step", "l_class", "l_tex", "l_sym", "l_area", "val_acc"]
    assert [int(r["step"]) for r in rows] == [0, 4, 8, 11]


def test_synth_then_train_consumes_directory(tmp_path, synth_json):
    data = tmp_path / "data"
    assert cli.main(["synth", "--config", str(synth_json), "--out", str(data), "--seed", "2"]) == 0
    assert (data / "truth.csv").exists() and (data / "synth_config.json").exists()
    out = tmp_path / "run"
    rc = cli.main(["train", "--data", str(data), "--out", str(out), "--steps", "3",
                   "--w-class", "1", "--batch-size", "4"] + MODEL_FLAGS)
    assert rc == 0 and (out / "model.statn").exists()


def test_synth_rejects_unknown_fields(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"colour": 3}))
    assert cli.main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_fit_zero_head_overlay_and_theta(tmp_path, small_model_file, image_file):
    out = tmp_path / "fit"
    assert cli.main(["fit", "--model", str(small_model_file), "--image", str(image_file),
                     "--out", str(out)]) == 0
    assert files_under(out) == {"overlay.ppm", "theta.txt"}
    theta, extra = parse_theta((out / "theta.txt").read_text())
    assert theta.phi == 0 and not theta.t.any() and extra["centroid_x"] == 0
    model = load_model(small_model_file)
    img = read_ppm(image_file)
    expected = data_io.render_grid_overlay(img, model.shape_mean.value, model.tris)
    assert np.abs(read_ppm(out / "overlay.ppm") - expected).max() <= 1 / 255


def test_average_of_one_equals_sample(tmp_path, small_model_file, image_file):
    s, a = tmp_path / "s", tmp_path / "a"
    assert cli.main(["sample", "--model", str(small_model_file), "--image", str(image_file),
                     "--out", str(s)]) == 0
    assert cli.main(["average", "--model", str(small_model_file), "--images", str(image_file),
                     "--out", str(a)]) == 0
    assert (s / "resampled.ppm").read_bytes() == (a / "average.ppm").read_bytes()
    img = read_ppm(image_file)
    np.testing.assert_allclose(read_ppm(s / "resampled.ppm"), geo.resize(img, (6, 6)), atol=1 / 255)


def test_fit_rejects_corrupt_model(tmp_path, image_file):
    bad = tmp_path / "bad.statn"
    bad.write_text("not a model\n")
    assert cli.main(["fit", "--model", str(bad), "--image", str(image_file),
                     "--out", str(tmp_path / "o")]) == 2


def test_components_untrained_mean_texture(tmp_path, small_model_file):
    out = tmp_path / "c"
    assert cli.main(["components", "--model", str(small_model_file), "--out", str(out)]) == 0
    names = files_under(out)
    for k in (1, 2):
        assert {f"texture_c{k}_minus.ppm", f"texture_c{k}_plus.ppm",
                f"shape_c{k}_minus.ppm", f"shape_c{k}_plus.ppm"} <= names
    assert {"mean_texture.ppm", "mean_shape.ppm", "components.png"} <= names
    np.testing.assert_allclose(read_ppm(out / "mean_texture.ppm"), 0.5, atol=1 / 255)


def test_gradcheck_passes_and_echoes_eps(tmp_path, capsys):
    assert cli.main(["gradcheck", "--eps", "1e-5", "--out", str(tmp_path / "g")]) == 0
    text = capsys.readouterr().out
    assert "eps=1e-05" in text and "all checks passed" in text
    rows = list(csv.DictReader((tmp_path / "g" / "gradcheck.csv").read_text().splitlines()))
    assert len(rows) == 16 and all(r["passed"] == "1" for r in rows)


def test_gradcheck_catches_rotation_sign_error(monkeypatch, capsys):
    good = geo.apply_rotation_backward

    def broken(grad, r, x):
        dr, dx = good(grad, r, x)
        return -dr, dx

    monkeypatch.setattr(geo, "apply_rotation_backward", broken)
    assert cli.main(["gradcheck"]) == 1
    out = capsys.readouterr().out
    assert "failed: rotation" in out
