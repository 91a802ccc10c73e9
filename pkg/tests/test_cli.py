import csv
import io
import subprocess
import sys
import time

import numpy as np
import pytest

from oracles import corpus
from srkit import checkpoint
from srkit.arch import NetworkSpec, build
from srkit.cli import main
from srkit.imaging import read_png, write_png
from srkit.train import AdamState, save_state


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("hr")
    for i, img in enumerate(corpus(32)[:3]):
        write_png(d / f"img{i}.png", img)
    return d


def write_config(path, data_dir, **extra):
    settings = dict(variant="carn", channels=4, blocks=1, units_per_block=2, scales=2, patch_size_lr=8,
                    batch_size=2, total_steps=3, lr0=1e-3, seed=1, dataset=data_dir,
                    checkpoint=path.parent / "model.crnk", log=path.parent / "log.csv")
    settings.update(extra)
    path.write_text("".join(f"{k} = {v}\n" for k, v in settings.items()))
    return path


def drop_seconds(text):
    return [row[:4] for row in csv.reader(io.StringIO(text))]


# -- analyze / sweep ---------------------------------------------------------


def test_analyze(tmp_path, capsys):
    start = time.perf_counter()
    assert main(["analyze", "--variant", "carn", "--scale", "4", "--out", str(tmp_path / "c.csv")]) == 0
    assert time.perf_counter() - start < 1.0
    assert "mult-adds 90.9G" in capsys.readouterr().out
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[-1][1] == "TOTAL" and int(rows[-1][2]) == 1_591_939


def test_analyze_custom_resolution(capsys):
    assert main(["analyze", "--variant", "carn-m", "--hr", "640x360", "--scale", "2"]) == 0
    assert "640x360" in capsys.readouterr().out


def test_sweep(tmp_path, capsys):
    assert main(["sweep", "--groups", "1,4,64", "--out", str(tmp_path / "s.csv")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert len(rows) == 6
    by = {(r["groups"], r["recursive"]): r for r in rows}
    assert by[("4", "0")]["mult_adds"] == by[("4", "1")]["mult_adds"]
    assert int(by[("4", "1")]["params"]) == 414_787


@pytest.mark.parametrize("argv", [
    ["analyze", "--variant", "nope"],
    ["analyze", "--set", "colour=blue"],
    ["analyze", "--scale", "5"],
    ["sweep", "--groups", "a,b"],
    ["upscale", "--scale", "2"],
    [],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1


# -- train -------------------------------------------------------------------


def test_train_is_reproducible_across_thread_counts(tmp_path, data_dir, monkeypatch):
    outputs = []
    for threads in ("1", "2"):
        run_dir = tmp_path / threads
        run_dir.mkdir()
        cfg = write_config(run_dir / "run.cfg", data_dir)
        monkeypatch.setenv("SRKIT_THREADS", threads)
        assert main(["train", str(cfg)]) == 0
        outputs.append(((run_dir / "model.crnk").read_bytes(), drop_seconds((run_dir / "log.csv").read_text())))
    assert outputs[0] == outputs[1]
    assert outputs[0][1][0] == ["step", "scale", "loss", "lr"]


def test_train_resume_equals_uninterrupted(tmp_path, data_dir):
    full = tmp_path / "full"
    part = tmp_path / "part"
    full.mkdir()
    part.mkdir()
    assert main(["train", str(write_config(full / "run.cfg", data_dir, total_steps=4))]) == 0
    cfg = write_config(part / "run.cfg", data_dir, total_steps=4)
    assert main(["train", str(cfg), "--set", "total_steps=2"]) == 0
    assert main(["train", str(cfg), "--resume"]) == 0
    assert (full / "model.crnk").read_bytes() == (part / "model.crnk").read_bytes()
    assert (full / "model.crnk.state").read_bytes() == (part / "model.crnk.state").read_bytes()
    assert drop_seconds((full / "log.csv").read_text()) == drop_seconds((part / "log.csv").read_text())


def test_train_empty_dataset_exit_2(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["train", str(write_config(tmp_path / "run.cfg", empty))]) == 2
    assert "no PNG images" in capsys.readouterr().err


def test_train_nan_exit_3(tmp_path, data_dir, capsys):
    cfg = write_config(tmp_path / "run.cfg", data_dir)
    _, store = build(NetworkSpec.preset("carn", channels=4, blocks=1, units_per_block=2, scales=(2,)))
    store["entry.weight"][...] = np.nan
    checkpoint.save(store, tmp_path / "model.crnk")
    save_state(AdamState(), tmp_path / "model.crnk.state")
    assert main(["train", str(cfg), "--resume"]) == 3
    assert "entry" in capsys.readouterr().err


def test_train_bad_config_exit_1(tmp_path, data_dir):
    assert main(["train", str(write_config(tmp_path / "run.cfg", data_dir, dropout=0.5))]) == 1


# -- upscale / eval ----------------------------------------------------------


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir):
    d = tmp_path_factory.mktemp("trained")
    assert main(["train", str(write_config(d / "run.cfg", data_dir))]) == 0
    return d / "model.crnk"


def test_upscale(tmp_path, data_dir, trained):
    src = data_dir / "img0.png"
    for name in ("a.png", "b.png"):
        assert main(["upscale", "--in", str(src), "--scale", "2", "--ckpt", str(trained), "--out", str(tmp_path / name)]) == 0
    out = read_png(tmp_path / "a.png")
    assert out.shape == (64, 64, 3)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_upscale_errors(tmp_path, data_dir, trained):
    src = str(data_dir / "img0.png")
    out = str(tmp_path / "o.png")
    assert main(["upscale", "--in", src, "--scale", "3", "--ckpt", str(trained), "--out", out]) == 2
    assert main(["upscale", "--in", src, "--scale", "2", "--ckpt", str(tmp_path / "none"), "--out", out]) == 2
    assert main(["upscale", "--in", str(tmp_path / "x.png"), "--scale", "2", "--ckpt", str(trained), "--out", out]) == 2
    (tmp_path / "junk.crnk").write_bytes(b"junk")
    assert main(["upscale", "--in", src, "--scale", "2", "--ckpt", str(tmp_path / "junk.crnk"), "--out", out]) == 2


def test_eval_rows(tmp_path, data_dir, trained):
    out = tmp_path / "e.csv"
    assert main(["eval", "--dataset", str(data_dir), "--scale", "2", "--ckpt", str(trained), "--out", str(out)]) == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["image", "scale", "psnr_db", "ssim"]
    assert [r[0] for r in rows[1:]] == ["img0", "img1", "img2", "MEAN", "BICUBIC"]
    per_image = [float(r[2]) for r in rows[1:4]]
    assert float(rows[4][2]) == pytest.approx(np.mean(per_image))


def test_eval_without_checkpoint_is_bicubic(tmp_path, data_dir, capsys):
    assert main(["eval", "--dataset", str(data_dir), "--scale", "2"]) == 0
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert rows[-1][0] == "BICUBIC" and rows[-1][2] == rows[-2][2]


def test_eval_missing_dataset_exit_2(tmp_path):
    assert main(["eval", "--dataset", str(tmp_path / "nope"), "--scale", "2"]) == 2


def test_module_entry_point():
    done = subprocess.run([sys.executable, "-m", "srkit", "analyze", "--variant", "carn-m"],
                          capture_output=True, text=True, check=False)
    assert done.returncode == 0
    assert "32.5G" in done.stdout
