import io
import logging

import numpy as np
import pytest

from pharnet.cli import main, pad_to_multiple
from pharnet.imageio import load_image, save_image, save_mask


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", "synth", "--out", str(out), "--desk", "--steps", "3", "--batch-size", "2"]) == 0
    return out


@pytest.fixture
def images(tmp_path):
    rng = np.random.default_rng(0)
    h, w = 44, 60
    save_image(rng.random((3, h, w)), tmp_path / "comp.ppm")
    save_image(rng.random((3, h, w)), tmp_path / "bg.ppm")
    mask = np.zeros((1, h, w))
    mask[:, 10:30, 20:40] = 1
    save_mask(mask, tmp_path / "mask.pgm")
    save_mask(np.zeros((1, h, w)), tmp_path / "empty.pgm")
    return tmp_path


def _harmonize(d, ckpt, *extra, mask="mask.pgm"):
    return main(
        [
            "harmonize",
            "--composite", str(d / "comp.ppm"),
            "--background", str(d / "bg.ppm"),
            "--mask", str(d / mask),
            "--checkpoint", str(ckpt),
            "--out", str(d / "out.ppm"),
            *extra,
        ]
    )


def test_train_writes_checkpoints_and_log(trained_dir, capsys):
    names = sorted(p.name for p in trained_dir.glob("*.ckpt"))
    assert "final.ckpt" in names and "step_000000.ckpt" in names
    assert len((trained_dir / "loss.log").read_text().splitlines()) == 3


def test_train_flag_conflict_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["train", "--data", "synth", "--out", str(tmp_path), "--ablation", "V2", "--residual-layers", "1,2"])
    assert info.value.code == 2


def test_bad_residual_layers_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["train", "--data", "synth", "--out", str(tmp_path), "--residual-layers", "1,5"])
    assert info.value.code == 2


def test_harmonize_pads_then_crops(trained_dir, images, caplog, capsys):
    with caplog.at_level(logging.WARNING, logger="pharnet"):
        code = _harmonize(images, trained_dir / "final.ckpt", "--soft-mask", str(images / "soft.pgm"))
    assert code == 0
    assert any("not a multiple of 8" in r.getMessage() for r in caplog.records)
    assert load_image(images / "out.ppm").shape == (3, 44, 60)
    assert load_image(images / "soft.pgm").shape == (1, 44, 60)


def test_harmonize_timing_line(trained_dir, images, capsys):
    assert _harmonize(images, trained_dir / "final.ckpt", "--time", "--reps", "2", "--warmup", "1") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("mean_ms=")
    assert float(lines[0].split("=")[1]) > 0


def test_harmonize_empty_mask_fails(trained_dir, images, capsys):
    assert _harmonize(images, trained_dir / "final.ckpt", mask="empty.pgm") == 1
    assert "mask is empty" in capsys.readouterr().err


def test_harmonize_missing_checkpoint_fails(images, capsys):
    assert _harmonize(images, images / "nope.ckpt") == 1
    assert capsys.readouterr().err.startswith("error:")


def test_pad_to_multiple():
    img = np.arange(2 * 5 * 3, dtype=float).reshape(2, 5, 3)
    padded = pad_to_multiple(img, 4, "reflect")
    assert padded.shape == (2, 8, 4)
    np.testing.assert_array_equal(padded[:, :5, :3], img)
    np.testing.assert_array_equal(padded[:, 5, :3], img[:, 4])  # mirrored at the edge
    assert pad_to_multiple(img[:, :4, :], 4, "zero")[:, :, 3].sum() == 0
    aligned = img[:, :4, :2]
    assert pad_to_multiple(aligned, 2, "zero") is aligned


def test_synth_data(tmp_path, capsys):
    assert main(["synth-data", "--out", str(tmp_path), "--n-fg", "2", "--n-bg", "2", "--size", "32"]) == 0
    assert (tmp_path / "manifest.txt").exists()


def test_bt_from_file_and_stdin(tmp_path, capsys, monkeypatch):
    text = "PAIR A B 8 2\nPAIR B C 7 3\nPAIR A C 9 1\n"
    (tmp_path / "pairs.txt").write_text(text)
    assert main(["bt", str(tmp_path / "pairs.txt")]) == 0
    from_file = capsys.readouterr().out
    monkeypatch.setattr("sys.stdin", io.StringIO(text))
    assert main(["bt", "-", "--pseudo-count", "0.5"]) == 0
    assert capsys.readouterr().out == from_file
    assert [l.split()[0] for l in from_file.splitlines()[1:]] == ["A", "B", "C"]


def test_bt_disconnected_fails(tmp_path, capsys):
    (tmp_path / "pairs.txt").write_text("PAIR A B 1 1\nPAIR C D 1 1\n")
    assert main(["bt", str(tmp_path / "pairs.txt")]) == 1
    assert "disconnected" in capsys.readouterr().err


def test_check_runs_suite(monkeypatch, gradcheck_suite, capsys):
    import pharnet.gradcheck

    monkeypatch.setattr(pharnet.gradcheck, "run_suite", lambda scale=8, seed=0, end_to_end=True: gradcheck_suite[0])
    assert main(["check"]) == 0
    out = capsys.readouterr().out
    assert out.count("CHECK ") == 15


def test_missing_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2
