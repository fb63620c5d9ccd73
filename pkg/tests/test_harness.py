import csv
import re

import numpy as np
import pytest

from signattack import harness
from signattack.attacks import KINDS
from signattack.cli import main
from signattack.images import decode_ppm, read_ppm
from signattack.model import load_weights

TINY = """\
[experiment]
seed = 3
reject_threshold = 0.6

[data]
num_classes = 4
per_class = 40
resolution = 16

[model]
conv_blocks = 8x3, 16x3
dense_width = 32

[train]
epochs = 12
batch_size = 16

[attack FGSM]
epsilon = 8/255

[attack BIM]
epsilon = 4/255
iterations = 10

[attack ONEPIXEL]
popsize = 12
de_iters = 6
image_index = 2

[attack UAP]
epsilon = 16/255

[attack PGD]
epsilon = 32/255
iterations = 20

[sweep]
attacks = PGD, FGSM
epsilons = 8/255, 0, 2/255
slice = 20
iterations = 5
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    (root / "tiny.ini").write_text(TINY)
    assert main(["train", "--config", str(root / "tiny.ini"), "--out", str(root / "out")]) == 0
    return root


def cfg_path(workdir):
    return str(workdir / "tiny.ini")


def test_parse_fractions_and_sections():
    cfg = harness.parse_config(TINY)
    assert cfg.seed == 3 and cfg.train.seed == 3
    assert cfg.model.conv_blocks == ((8, 3), (16, 3))
    assert cfg.model.input_resolution == 16 and cfg.model.num_classes == 4
    assert [a.kind for a in cfg.attacks] == ["FGSM", "BIM", "ONEPIXEL", "UAP", "PGD"]
    assert cfg.attacks[0].epsilon == 8 / 255
    assert cfg.image_indices == [None, None, 2, None, None]
    assert cfg.sweep.epsilons == (8 / 255, 0.0, 2 / 255)


def test_config_text_round_trip():
    cfg = harness.parse_config(TINY)
    text = cfg.to_text()
    again = harness.parse_config(text)
    assert again.to_text() == text
    assert again.model == cfg.model and again.train == cfg.train
    assert again.attacks == cfg.attacks


@pytest.mark.parametrize("text, match", [
    ("[attack DEEPFOOL]\n", "valid kinds: " + ", ".join(KINDS)),
    ("[train]\nepochz = 3\n", "epochz"),
    ("[colours]\n", "unknown section"),
    ("[sweep]\nattacks = CW\n", "cannot sweep"),
    ("[train]\nepochs = many\n", "expected int"),
    ("[model]\nconv_blocks = 8by3\n", "FILTERSxKERNEL"),
    ("[attack FGSM]\nepsilon = 2\n", "epsilon"),
])
def test_config_errors(text, match):
    with pytest.raises(harness.ConfigError, match=match):
        harness.parse_config(text)


def test_train_outputs(workdir):
    out = workdir / "out"
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_accuracy" and len(lines) == 12 + 1
    rows = list(csv.reader((out / "confusion.csv").open()))
    assert len(rows) == 4 and all(len(r) == 4 for r in rows)
    assert sum(int(v) for r in rows for v in r) == 24
    assert load_weights(out / "model.sgn").num_classes == 4
    assert not list(out.glob(".staging-*"))


def test_train_is_byte_identical(workdir, tmp_path):
    assert main(["train", "--config", cfg_path(workdir), "--out", str(tmp_path)]) == 0
    for name in ("model.sgn", "metrics.csv", "confusion.csv"):
        assert (tmp_path / name).read_bytes() == (workdir / "out" / name).read_bytes()


def test_seed_override_changes_weights(workdir, tmp_path):
    assert main(["train", "--config", cfg_path(workdir), "--out", str(tmp_path),
                 "--seed", "4"]) == 0
    assert (tmp_path / "model.sgn").read_bytes() != (workdir / "out" / "model.sgn").read_bytes()


def test_unwritable_out_fails_before_training(workdir, tmp_path, monkeypatch, capsys):
    calls = []
    monkeypatch.setattr(harness, "train", lambda *a, **k: calls.append(a))
    blocker = tmp_path / "file"
    blocker.write_text("")
    code = main(["train", "--config", cfg_path(workdir), "--out", str(blocker / "sub")])
    assert code != 0 and not calls
    assert "error" in capsys.readouterr().err


def test_failed_command_leaves_no_partial_output(tmp_path):
    with pytest.raises(RuntimeError):
        with harness.staged_output(tmp_path) as stage:
            (stage / "report.md").write_text("half")
            raise RuntimeError("boom")
    assert list(tmp_path.iterdir()) == []


def test_weights_elsewhere(workdir, tmp_path):
    target = tmp_path / "w" / "m.sgn"
    target.parent.mkdir()
    assert main(["train", "--config", cfg_path(workdir), "--out", str(tmp_path / "o"),
                 "--weights", str(target)]) == 0
    assert target.read_bytes() == (workdir / "out" / "model.sgn").read_bytes()
    assert not (tmp_path / "o" / "model.sgn").exists()


@pytest.fixture(scope="module")
def attacked(workdir):
    out = workdir / "out"
    assert main(["attack", "--config", cfg_path(workdir), "--out", str(out)]) == 0
    return out


def test_report_columns_and_rows(attacked):
    lines = (attacked / "report.md").read_text().splitlines()
    header = [c.strip() for c in lines[0].strip("|").split("|")]
    assert header == list(harness.REPORT_COLUMNS)
    body = [l for l in lines[2:] if l.startswith("|")]
    assert [l.split("|")[2].strip() for l in body] == ["FGSM", "BIM", "OPA", "UAP", "PGD"]


def test_na_cells_follow_threshold(attacked):
    rows = list(csv.DictReader((attacked / "report.csv").open()))
    md = [l for l in (attacked / "report.md").read_text().splitlines()[2:] if l.startswith("|")]
    for row, line in zip(rows, md):
        cells = [c.strip() for c in line.strip("|").split("|")]
        na = float(row["after_confidence"]) < 0.6
        assert (cells[7] == "NA") == na and (cells[8] == "NA") == na
        assert (row["after_label"] == "NA") == na
        if row["success"] == "false" and not na:
            assert row["after_label"] == row["before_label"]
    outcomes = {(r["success"], r["after_label"] == "NA") for r in rows}
    assert {("true", True), ("false", False)} <= outcomes


def test_report_images(attacked):
    for n in range(1, 6):
        for kind in ("orig", "noise", "adv", "cam_before", "cam_after"):
            img = read_ppm(attacked / "img" / f"{n:03d}_{kind}.ppm")
            width = 3 * 16 + 4 if kind.startswith("cam") else 16
            assert img.shape == (16, width, 3)


def test_attack_is_byte_identical(workdir, attacked, tmp_path):
    (tmp_path / "model.sgn").write_bytes((attacked / "model.sgn").read_bytes())
    assert main(["attack", "--config", cfg_path(workdir), "--out", str(tmp_path)]) == 0
    for rel in ["report.md", "report.csv"] + [f"img/{p.name}" for p in (attacked / "img").iterdir()]:
        assert (tmp_path / rel).read_bytes() == (attacked / rel).read_bytes(), rel


def test_score_format():
    assert harness.percent(0.835) == "84%" and harness.percent(0.9) == "90%"
    assert harness.percent(0.004) == "0%"


def test_noise_visualization():
    assert np.all(harness.noise_image(np.zeros((3, 3, 3))) == 0.5)
    v = harness.noise_image(np.array([[[0.1, -0.05, 0.0]]]))
    np.testing.assert_allclose(v, [[[1.0, 0.25, 0.5]]])


def test_missing_weights(workdir, tmp_path, capsys):
    assert main(["attack", "--config", cfg_path(workdir), "--out", str(tmp_path)]) == 1
    assert "model.sgn" in capsys.readouterr().err


def test_sweep(workdir, capsys):
    out = workdir / "out"
    assert main(["sweep", "--config", cfg_path(workdir), "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "sweep.csv").open()))
    assert [r["attack"] for r in rows] == ["FGSM"] * 3 + ["PGD"] * 3
    for kind in ("FGSM", "PGD"):
        eps = [float(r["epsilon"]) for r in rows if r["attack"] == kind]
        assert all(b > a for a, b in zip(eps, eps[1:]))
    stdout = capsys.readouterr().out
    assert re.search(r"^FGSM: success rate min \d\.\d{3} max \d\.\d{3}$", stdout, re.M)
    assert re.search(r"^PGD: ", stdout, re.M)

    cfg = harness.load_config(out.parent / "tiny.ini")
    model = load_weights(out / "model.sgn")
    data = harness.build_dataset(cfg)
    x = np.stack([e.image for e in data.test[:20]])
    y = np.array([e.class_id for e in data.test[:20]])
    probs = model.probabilities(x)
    clean_err = np.mean((probs.argmax(axis=1) != y) | (probs.max(axis=1) < 0.6))
    zero_rows = [float(r["success_rate"]) for r in rows if float(r["epsilon"]) == 0.0]
    assert zero_rows == [clean_err, clean_err]


def test_eval(workdir, tmp_path, capsys):
    out = workdir / "out"
    assert main(["eval", "--config", cfg_path(workdir), "--out", str(out)]) == 0
    assert re.match(r"test accuracy \d\.\d{4} \(\d+/24\)", capsys.readouterr().out)


def test_explain(workdir, attacked, tmp_path, capsys):
    image = attacked / "img" / "001_orig.ppm"
    target = tmp_path / "e.ppm"
    args = ["explain", "--config", cfg_path(workdir), "--out", str(attacked), "--output",
            str(target), str(image)]
    assert main(args) == 0
    printed = capsys.readouterr().out.strip()
    assert re.fullmatch(r"\S+ \d{1,3}%", printed)
    blob = target.read_bytes()
    assert blob.startswith(b"P6\n52 16\n255\n")
    assert decode_ppm(blob).shape == (16, 52, 3)
    assert main(args) == 0
    assert target.read_bytes() == blob

    model = load_weights(attacked / "model.sgn")
    label = int(np.argmax(model.logits(read_ppm(image))))
    assert printed.startswith(harness.class_names(harness.load_config(workdir / "tiny.ini"))[label])
    assert main(args + ["--class", str(label)]) == 0
    assert target.read_bytes() == blob


def test_explain_bad_layer(attacked, tmp_path, capsys):
    code = main(["explain", "--out", str(attacked), "--layer", "dense1",
                 "--output", str(tmp_path / "x.ppm"), str(attacked / "img" / "001_orig.ppm")])
    assert code == 1
    assert "conv1, conv2" in capsys.readouterr().err


def test_python_dash_m(workdir):
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "signattack", "attack", "--config",
                           str(workdir / "missing.ini")], capture_output=True, text=True)
    assert proc.returncode != 0
