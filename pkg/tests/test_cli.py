import json

import numpy as np
import pytest

from carkit import viz
from carkit.checkpoint import load_checkpoint
from carkit.cli import main
from carkit.image import load_png, save_png

TINY = '{"base": 4, "cap": 8, "n_res": 1, "head_ch": 4}'


@pytest.fixture
def imgdir(tmp_path):
    rng = np.random.default_rng(0)
    d = tmp_path / "imgs"
    d.mkdir()
    for i in range(4):
        save_png(rng.random((16, 16, 3)), d / f"{i}.png")
    return d


def _train(tmp_path, imgdir, out="run", extra=()):
    args = ["train", "--train-dir", str(imgdir), "--val-dir", str(imgdir), "--out", str(tmp_path / out),
            "--set", "scale=2", "--set", "lam=0.1", "--set", "gamma=0.1", "--set", "patch_size=8",
            "--set", "batch_size=2", "--set", f"topology={TINY}", "--quiet", *extra]
    return main(args)


def _lines(text):
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def test_missing_scale_exit_2(tmp_path, imgdir, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lam": 1.0, "gamma": 1.0}))
    assert main(["train", "--config", str(cfg), "--train-dir", str(imgdir), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "scale" in err and len(err.strip().splitlines()) == 1
    assert not (tmp_path / "o").exists()


def test_unknown_key_rejected(tmp_path, imgdir, capsys):
    assert _train(tmp_path, imgdir, extra=["--set", "colour=1"]) == 2
    assert "colour" in capsys.readouterr().err


def test_empty_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    code = main(["train", "--train-dir", str(tmp_path / "empty"), "--out", str(tmp_path / "o"),
                 "--set", "scale=2", "--set", "lam=0", "--set", "gamma=0"])
    assert code == 1 and "no PNG" in capsys.readouterr().err


def test_train_writes_loadable_checkpoint(tmp_path, imgdir, capsys):
    assert _train(tmp_path, imgdir) == 0
    run = tmp_path / "run"
    load_checkpoint(run / "model.ckpt")
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["scale"] == 2 and cfg["train_dir"] == str(imgdir)
    log = _lines((run / "log.jsonl").read_text())
    assert {"step", "loss", "l1", "reg", "tv", "lr"} <= set(log[0])
    assert any("val_psnr" in r for r in log)


def test_config_file_and_flag_override(tmp_path, imgdir):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scale": 2, "lam": 0.1, "gamma": 0.1, "patch_size": 8, "batch_size": 2,
                               "topology": json.loads(TINY), "seed": 1, "train_dir": str(imgdir),
                               "out_dir": str(tmp_path / "r")}))
    assert main(["train", "--config", str(cfg), "--seed", "7", "--quiet"]) == 0
    assert json.loads((tmp_path / "r" / "config.json").read_text())["seed"] == 7


def test_same_seed_identical_logs(tmp_path, imgdir):
    assert _train(tmp_path, imgdir, "a") == 0
    assert _train(tmp_path, imgdir, "b") == 0
    assert (tmp_path / "a" / "log.jsonl").read_bytes() == (tmp_path / "b" / "log.jsonl").read_bytes()


def test_downscale_upscale_restores_extents(tmp_path, imgdir):
    _train(tmp_path, imgdir)
    ckpt = str(tmp_path / "run" / "model.ckpt")
    src = str(imgdir / "0.png")
    assert main(["downscale", "--ckpt", ckpt, "--in", src, "--out", str(tmp_path / "lr.png")]) == 0
    assert load_png(tmp_path / "lr.png").shape == (8, 8, 3)
    assert main(["upscale", "--bicubic", "--scale", "2", "--in", str(tmp_path / "lr.png"),
                 "--out", str(tmp_path / "sr.png")]) == 0
    assert load_png(tmp_path / "sr.png").shape == (16, 16, 3)
    # byte-stable across runs
    main(["downscale", "--ckpt", ckpt, "--in", src, "--out", str(tmp_path / "lr2.png")])
    np.testing.assert_array_equal(load_png(tmp_path / "lr.png"), load_png(tmp_path / "lr2.png"))


def test_identity_checkpoint_is_byte_exact(tmp_path, imgdir):
    assert main(["identity", "--out", str(tmp_path / "id.ckpt")]) == 0
    src = imgdir / "1.png"
    assert main(["downscale", "--ckpt", str(tmp_path / "id.ckpt"), "--in", str(src),
                 "--out", str(tmp_path / "same.png")]) == 0
    np.testing.assert_array_equal(load_png(tmp_path / "same.png"), load_png(src))


def test_indivisible_input(tmp_path, imgdir, capsys):
    _train(tmp_path, imgdir)
    odd = tmp_path / "odd.png"
    save_png(np.zeros((15, 16, 3)), odd)
    capsys.readouterr()
    code = main(["downscale", "--ckpt", str(tmp_path / "run" / "model.ckpt"), "--in", str(odd),
                 "--out", str(tmp_path / "o.png")])
    err = capsys.readouterr().err
    assert code == 1 and "crop" in err and len(err.strip().splitlines()) == 1
    assert not (tmp_path / "o.png").exists()


def test_missing_checkpoint(tmp_path, imgdir, capsys):
    code = main(["downscale", "--ckpt", str(tmp_path / "nope.ckpt"), "--in", str(imgdir / "0.png"),
                 "--out", str(tmp_path / "o.png")])
    assert code == 1 and capsys.readouterr().err.startswith("error:")


def test_eval_stream(tmp_path, imgdir, capsys):
    main(["identity", "--out", str(tmp_path / "id.ckpt")])
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(tmp_path / "id.ckpt"), "--hr-dir", str(imgdir)]) == 0
    recs = _lines(capsys.readouterr().out)
    assert len(recs) == 5 and recs[-1]["name"] == "aggregate" and recs[0]["psnr_y"] == "inf"
    assert main(["eval", "--scale", "2", "--hr-dir", str(imgdir), "--out", str(tmp_path / "r.jsonl")]) == 0
    assert len(_lines((tmp_path / "r.jsonl").read_text())) == 5


def test_gradcheck_default_and_minimal(capsys):
    assert main(["gradcheck"]) == 0
    recs = _lines(capsys.readouterr().out)
    assert recs[-1]["summary"] == "pass"
    assert all(r["max_rel_error"] < 1e-5 for r in recs[:-1])
    assert main(["gradcheck", "--size", "4"]) == 0


def test_gradcheck_corrupted_fails(capsys):
    assert main(["gradcheck", "--corrupt"]) == 1
    assert _lines(capsys.readouterr().out)[-1]["summary"] == "fail"


def test_viz_outputs(tmp_path, imgdir):
    _train(tmp_path, imgdir)
    assert main(["viz", "--ckpt", str(tmp_path / "run" / "model.ckpt"), "--in", str(imgdir / "0.png"),
                 "--out-dir", str(tmp_path / "viz")]) == 0
    files = sorted((tmp_path / "viz").iterdir())
    assert len(files) == 10
    for f in files:
        assert load_png(f).shape[:2] == (8, 8)


class TestVizMaps:
    def test_zero_offsets_render_white(self):
        z = np.zeros((4, 5, 6, 6))
        np.testing.assert_array_equal(viz.offset_map(z, z, 3.0), 1.0)

    def test_uniform_kernels_flat(self):
        maps = viz.central_kernel_maps(np.full((4, 5, 6, 6), 1 / 36))
        assert len(maps) == 9
        for _, m in maps:
            assert m.shape == (4, 5, 1) and np.ptp(m) == 0

    def test_hue_encodes_direction(self):
        dX = np.zeros((1, 2, 2, 2))
        dY = np.zeros((1, 2, 2, 2))
        dX[0, 0] = 3.0   # full-magnitude along +rows: hue 0, red
        dY[0, 1] = -1.5  # half magnitude along -cols
        out = viz.offset_map(dX, dY, 3.0)
        np.testing.assert_allclose(out[0, 0], [1.0, 0.0, 0.0])
        assert out[0, 1].min() == pytest.approx(0.5)
