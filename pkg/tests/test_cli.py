import numpy as np
import pytest

from scanfer.cli import main
from scanfer.data import decode_pgm, decode_ppm
from scanfer.metrics import parse_report_text

EPOCHS = 2


def write_config(path, manifest, out_dir, **extra):
    lines = [f"train_manifest = {manifest}", f"out_dir = {out_dir}", f"epochs = {EPOCHS}", "batch_size = 16",
             "input_size = 20", "lr_backbone = 0.01", "lr_heads = 0.05"]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth-data", "--out", str(root / "data"), "--per-class", "3", "--seed", "5"]) == 0
    cfg = write_config(root / "run.conf", "data/manifest.csv", "out")
    assert main(["train", "--config", str(cfg)]) == 0
    return root


def test_synth_data_feeds_train(trained_run):
    assert len(list((trained_run / "data" / "images").glob("*.ppm"))) == 21
    history = (trained_run / "out" / "history.tsv").read_text().splitlines()
    assert len(history) == EPOCHS
    assert all(len(line.split("\t")) == 10 for line in history)
    assert (trained_run / "out" / "best.ckpt").is_file()


def test_train_is_deterministic(trained_run, tmp_path):
    cfg = write_config(tmp_path / "again.conf", trained_run / "data" / "manifest.csv", tmp_path / "out")
    assert main(["train", "--config", str(cfg)]) == 0
    assert (tmp_path / "out" / "history.tsv").read_bytes() == (trained_run / "out" / "history.tsv").read_bytes()


def test_seed_flag_changes_run(trained_run, tmp_path):
    cfg = write_config(tmp_path / "s.conf", trained_run / "data" / "manifest.csv", tmp_path / "out")
    assert main(["train", "--config", str(cfg), "--seed", "9"]) == 0
    assert (tmp_path / "out" / "history.tsv").read_bytes() != (trained_run / "out" / "history.tsv").read_bytes()


def test_train_missing_manifest(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.conf", "nowhere/manifest.csv", "out")
    assert main(["train", "--config", str(cfg)]) != 0
    assert str(tmp_path / "nowhere" / "manifest.csv") in capsys.readouterr().err


def test_train_bad_config(tmp_path, capsys):
    (tmp_path / "c.conf").write_text("epochs = many\n")
    assert main(["train", "--config", str(tmp_path / "c.conf")]) == 2
    assert "epochs" in capsys.readouterr().err


def test_eval_matches_train_report(trained_run, tmp_path, capsys):
    out = tmp_path / "eval.txt"
    code = main(["eval", "--ckpt", str(trained_run / "out" / "best.ckpt"),
                 "--manifest", str(trained_run / "data" / "manifest.csv"), "--out", str(out)])
    assert code == 0
    assert out.read_text() == (trained_run / "out" / "report.txt").read_text()
    fields = parse_report_text(capsys.readouterr().out)
    overall = 0.67 * float(fields["macro_f1"]) + 0.33 * float(fields["accuracy"])
    assert abs(overall - float(fields["overall"])) < 1e-12


def test_eval_rejects_corrupt_checkpoint(trained_run, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"JUNK" + (trained_run / "out" / "best.ckpt").read_bytes()[4:])
    assert main(["eval", "--ckpt", str(bad), "--manifest", str(trained_run / "data" / "manifest.csv")]) == 2
    assert "magic" in capsys.readouterr().err


def test_gradcam_outputs(trained_run, tmp_path, capsys):
    ckpt = str(trained_run / "out" / "best.ckpt")
    image = str(trained_run / "data" / "images" / "c4_0001.ppm")
    assert main(["gradcam", "--ckpt", ckpt, "--image", image, "--out", str(tmp_path / "a")]) == 0
    printed = capsys.readouterr().out
    predicted = int(printed.split("predicted=")[1].split()[0])
    pgm = tmp_path / "a" / f"c4_0001_gradcam_c{predicted}.pgm"
    ppm = tmp_path / "a" / f"c4_0001_overlay_c{predicted}.ppm"
    heat = decode_pgm(pgm.read_bytes())
    assert heat.shape == (20, 20) and np.all((heat >= 0) & (heat <= 1))
    assert decode_ppm(ppm.read_bytes()).shape == (3, 20, 20)

    assert main(["gradcam", "--ckpt", ckpt, "--image", image, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / pgm.name).read_bytes() == pgm.read_bytes()
    assert (tmp_path / "b" / ppm.name).read_bytes() == ppm.read_bytes()

    other = (predicted + 1) % 7
    assert main(["gradcam", "--ckpt", ckpt, "--image", image, "--class", str(other),
                 "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / f"c4_0001_gradcam_c{other}.pgm").is_file()


def test_gradcam_unreadable_image(trained_run, tmp_path):
    code = main(["gradcam", "--ckpt", str(trained_run / "out" / "best.ckpt"), "--image", str(tmp_path / "x.ppm")])
    assert code != 0


def test_gradcam_rejects_bad_class(trained_run):
    with pytest.raises(SystemExit):
        main(["gradcam", "--ckpt", "x", "--image", "y", "--class", "7"])


def test_check_grad_passes_and_detects_fault(tmp_path, capsys):
    cfg = tmp_path / "g.conf"
    cfg.write_text("input_size = 20\n")
    assert main(["check-grad", "--config", str(cfg), "--per-tensor", "3"]) == 0
    assert "max_rel_error=" in capsys.readouterr().out
    assert main(["check-grad", "--config", str(cfg), "--per-tensor", "3", "--inject-fault"]) == 1
