import json

import numpy as np
import pytest

from genclassify.cli import main
from genclassify.classify import read_records_csv
from genclassify.data import empty_dataset, load_idx_dataset, save_idx_dataset, write_pgm
from genclassify.models import load_bundle

FAST = ["--mc-samples", "50", "--max-iters", "20"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["make-data", "--per-class", "30", "--ood-count", "20", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def bundle_path(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("bundle") / "b.gcb"
    assert main(["train", "--data", str(data_dir), "--latent-dim", "4", "--softmax", "--out", str(out)]) == 0
    return out


def test_make_data_files(data_dir):
    for name in ("train-images.idx", "train-labels.idx", "test-images.idx", "test-labels.idx", "ood-images.idx"):
        assert (data_dir / name).is_file()
    train = load_idx_dataset(data_dir / "train-images.idx", data_dir / "train-labels.idx")
    assert len(train) == 60 and train.num_classes == 4


def test_train_linear_bundle(bundle_path, capsys):
    bundle = load_bundle(bundle_path)
    assert bundle.generator_kind == "linear" and len(bundle.generators) == 4
    assert bundle.softmax is not None


def test_train_is_deterministic(data_dir, tmp_path):
    a, b = tmp_path / "a.gcb", tmp_path / "b.gcb"
    for p in (a, b):
        assert main(["train", "--data", str(data_dir), "--latent-dim", "4", "--softmax", "--seed", "3",
                     "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_train_logs_epochs_and_config(data_dir, tmp_path, capsys):
    assert main(["train", "--model", "softmax", "--epochs", "3", "--data", str(data_dir),
                 "--out", str(tmp_path / "s.gcb")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# train: resolved configuration")
    assert "softmax.epochs = 3" in out
    assert [l for l in out.splitlines() if l.startswith("softmax epoch")] == \
           [l for l in out.splitlines() if l.startswith("softmax epoch ") and "loss" in l]
    assert sum(l.startswith("softmax epoch") for l in out.splitlines()) == 3


def test_train_vae_logs_each_epoch(data_dir, tmp_path, capsys):
    assert main(["train", "--model", "vae", "--epochs", "2", "--latent-dim", "2", "--hidden-dim", "8",
                 "--data", str(data_dir), "--out", str(tmp_path / "v.gcb")]) == 0
    out = capsys.readouterr().out
    assert sum(" epoch " in l and l.startswith("class ") for l in out.splitlines()) == 8
    assert load_bundle(tmp_path / "v.gcb").generator_kind == "vae"


def test_missing_path_exits_2(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(["train", "--data", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err
    assert main(["classify", "--bundle", str(tmp_path / "none.gcb")]) == 2
    assert "none.gcb" in capsys.readouterr().err


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as info:
        main(["train", "--no-such-flag"])
    assert info.value.code == 2


def test_classify_single_pgm(bundle_path, data_dir, tmp_path):
    test = load_idx_dataset(data_dir / "test-images.idx", data_dir / "test-labels.idx")
    j = int(test.labels[3])
    pgm = tmp_path / "x.pgm"
    write_pgm(pgm, test.images()[3])
    out = tmp_path / "pred.csv"
    rat = tmp_path / "rat"
    assert main(["classify", "--bundle", str(bundle_path), "--pgm", str(pgm), "--out", str(out),
                 "--rationale", str(rat)] + FAST) == 0
    records = read_records_csv(out)
    assert len(records) == 1 and records[0].prediction.label == j
    assert len(list(rat.glob("*.pgm"))) == 4
    index = (rat / "index.txt").read_text().splitlines()
    assert index[0] == "example,class,score,file" and len(index) == 5


def test_classify_dataset_modes(bundle_path, data_dir, tmp_path):
    for clf in ("generative", "softmax", "hybrid"):
        out = tmp_path / f"{clf}.csv"
        assert main(["classify", "--bundle", str(bundle_path), "--data", str(data_dir), "--split", "test",
                     "--classifier", clf, "--out", str(out), "--threads", "2"] + FAST) == 0
        records = read_records_csv(out)
        assert len(records) == 60
        assert np.mean([r.correct for r in records]) >= 0.95


def test_classify_empty_idx_gives_header_only(bundle_path, tmp_path):
    save_idx_dataset(empty_dataset(16, 16, 4), tmp_path / "e-img.idx", tmp_path / "e-lab.idx")
    out = tmp_path / "p.csv"
    assert main(["classify", "--bundle", str(bundle_path), "--images", str(tmp_path / "e-img.idx"),
                 "--labels", str(tmp_path / "e-lab.idx"), "--num-classes", "4", "--out", str(out)]) == 0
    assert out.read_text() == "index,true_label,ood,pred_label,confidence,classifier\n"


def test_classify_shape_mismatch_exits_2(bundle_path, tmp_path, capsys):
    pgm = tmp_path / "small.pgm"
    write_pgm(pgm, np.zeros((8, 8)))
    assert main(["classify", "--bundle", str(bundle_path), "--pgm", str(pgm)]) == 2
    assert "16x16" in capsys.readouterr().err


def test_classify_softmax_rationale_rejected(bundle_path, tmp_path):
    assert main(["classify", "--bundle", str(bundle_path), "--classifier", "softmax",
                 "--rationale", str(tmp_path / "r"), "--out", str(tmp_path / "p.csv")]) == 2


def test_evaluate_and_riskcov(bundle_path, data_dir, tmp_path, capsys):
    recs = tmp_path / "g.csv"
    assert main(["classify", "--bundle", str(bundle_path), "--data", str(data_dir), "--split", "ood",
                 "--classifier", "softmax", "--out", str(recs)]) == 0
    report = tmp_path / "r.json"
    assert main(["evaluate", str(recs), "--out", str(report)]) == 0
    data = json.loads(report.read_text())[str(recs)]
    assert data["n"] == 20 and data["accuracy"] == 0.0
    out = tmp_path / "rc"
    assert main(["riskcov", str(recs), "--out", str(out)]) == 0
    assert (out / "g_curve.csv").is_file() and (out / "riskcov.svg").is_file()
    assert main(["evaluate", str(tmp_path / "missing.csv")]) == 2


def test_experiment_invalid_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[search]\nmc_samples = 10\nwarp_drive = on\n")
    assert main(["experiment", str(cfg), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "warp_drive" in err and "line 3" in err


def test_experiment_refuses_non_empty_dir(tmp_path, capsys):
    out = tmp_path / "o"
    out.mkdir()
    (out / "x").write_text("keep")
    assert main(["experiment", "--out", str(out)]) == 2
    assert "not empty" in capsys.readouterr().err


def test_experiment_small_run(tmp_path, capsys):
    cfg = tmp_path / "small.cfg"
    cfg.write_text("[data]\nper_class = 24\n[model]\nlatent_dim = 4\n[mix]\nood_count = 24\n"
                   "[softmax]\nepochs = 5\n[search]\nmc_samples = 40\nmax_iters = 10\n")
    out = tmp_path / "o"
    assert main(["experiment", str(cfg), "--out", str(out), "--seed", "2"]) == 0
    text = capsys.readouterr().out
    assert text.startswith("# experiment: resolved configuration")
    assert "#   seed = 2" in text
    assert "softmax epoch 5" in text
    assert "augmented split checks" in text
    assert not (out / "INCOMPLETE").exists()
