import json

import pytest

from zbcnn.cli import main
from zbcnn.config import RunConfig, load_config, parse_config
from zbcnn.errors import UsageError

SLIM = ["--widths", "3,4,5", "--hidden", "8"]


def test_config_grammar():
    vals = parse_config("# comment\nseed = 4\n\nlearning_rate=0.5  # trailing\naugment = false\n")
    assert vals == {"seed": 4, "learning_rate": 0.5, "augment": False}
    with pytest.raises(UsageError, match="line 1"):
        parse_config("bogus = 1")
    with pytest.raises(UsageError):
        parse_config("seed 4")
    with pytest.raises(UsageError):
        parse_config("seed = four")


def test_default_hyperparameters():
    cfg = RunConfig()
    assert (cfg.learning_rate, cfg.momentum, cfg.weight_decay, cfg.batch_size) == (0.01, 0.9, 1e-5, 64)
    assert (cfg.dropout, cfg.topn, cfg.layer, cfg.bins, cfg.widths, cfg.hidden) == (0.5, 10, 3, 32, "64,128,256", 300)


def test_snapshot_round_trip(tmp_path):
    cfg = load_config(None, {"seed": 9, "augment": False, "classes": "happy,sad"})
    cfg.save(tmp_path / "c.txt")
    assert load_config(tmp_path / "c.txt") == cfg
    assert load_config(tmp_path / "c.txt", {"seed": 1}).seed == 1


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--subjects", "10", "--per-subject", "6", "--seed", "3", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    rc = main(["train", "--manifest", str(synth_dir / "manifest.csv"), "--epochs", "2", *SLIM,
               "--out", str(out)])
    assert rc == 0
    return out


def test_synth_counts(tmp_path):
    assert main(["synth", "--subjects", "40", "--per-subject", "25", "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "manifest.csv").read_text().splitlines()) == 1001
    assert (tmp_path / "factors.csv").is_file() and (tmp_path / "config.txt").is_file()


def test_synth_is_byte_identical(tmp_path):
    trees = []
    for name in ("a", "b"):
        out = tmp_path / name
        main(["synth", "--subjects", "10", "--per-subject", "2", "--seed", "5", "--out", str(out)])
        trees.append({p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    a, b = trees
    a["config.txt"] = a["config.txt"].replace(b"/a", b"/b")
    assert a == b


def test_train_outputs(trained):
    lines = (trained / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines] == [1, 2]
    assert (trained / "weights.zbcnn").is_file()
    snap = (trained / "config.txt").read_text()
    assert "epochs = 2" in snap and "classes = neutral,anger,disgust,happy,sad,surprise" in snap


def test_train_replays_from_snapshot(trained, tmp_path):
    assert main(["train", "--config", str(trained / "config.txt"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "weights.zbcnn").read_bytes() == (trained / "weights.zbcnn").read_bytes()


def test_eval(trained, synth_dir, tmp_path, capsys):
    rc = main(["eval", "--weights", str(trained / "weights.zbcnn"), "--manifest", str(synth_dir / "manifest.csv"),
               "--out", str(tmp_path)])
    assert rc == 0
    result = json.loads((tmp_path / "eval.json").read_text())
    assert sum(map(sum, result["confusion"])) == 60
    assert "accuracy" in capsys.readouterr().out


def test_eval_class_count_mismatch(trained, synth_dir, tmp_path):
    lines = (synth_dir / "manifest.csv").read_text().splitlines()
    keep = [lines[0]] + [l for l in lines[1:] if l.split(",")[2] in ("happy", "sad")]
    (synth_dir / "two.csv").write_text("\n".join(keep) + "\n")
    rc = main(["eval", "--weights", str(trained / "weights.zbcnn"), "--manifest", str(synth_dir / "two.csv"),
               "--out", str(tmp_path)])
    assert rc == 1


def test_crossval_prints_mean_std(synth_dir, tmp_path, capsys):
    rc = main(["crossval", "--manifest", str(synth_dir / "manifest.csv"), "--folds", "5", "--epochs", "1",
               *SLIM, "--out", str(tmp_path)])
    assert rc == 0
    last = capsys.readouterr().out.strip().splitlines()[-1]
    assert last.startswith("ck_plus_10fold: ") and "% ± " in last
    assert len(json.loads((tmp_path / "crossval.json").read_text())["folds"]) == 5


def test_crossval_too_few_subjects(tmp_path):
    main(["synth", "--subjects", "10", "--per-subject", "1", "--out", str(tmp_path / "d")])
    lines = (tmp_path / "d" / "manifest.csv").read_text().splitlines()
    keep = [lines[0]] + [l for l in lines[1:] if l.split(",")[1] in ("S000", "S001", "S002", "S003", "S004")]
    (tmp_path / "five.csv").write_text("\n".join(keep).replace("images/", "d/images/") + "\n")
    rc = main(["crossval", "--manifest", str(tmp_path / "five.csv"), "--epochs", "1", *SLIM,
               "--out", str(tmp_path / "cv")])
    assert rc == 1


def test_visualize_grid_and_verify(trained, synth_dir, tmp_path, capsys):
    rc = main(["visualize", "--weights", str(trained / "weights.zbcnn"), "--manifest",
               str(synth_dir / "manifest.csv"), "--filters", "auto:3", "--topn", "4", "--verify",
               "--out", str(tmp_path)])
    assert rc == 0
    assert (tmp_path / "grid_plain.png").is_file() and (tmp_path / "grid_guided.png").is_file()
    assert len(json.loads((tmp_path / "grid_guided.json").read_text())) == 12
    assert "verified" in capsys.readouterr().out


def test_visualize_topn_larger_than_dataset(trained, synth_dir, tmp_path, capsys):
    rc = main(["visualize", "--weights", str(trained / "weights.zbcnn"), "--manifest",
               str(synth_dir / "manifest.csv"), "--filters", "0", "--topn", "500", "--out", str(tmp_path)])
    assert rc == 0
    assert "warning" in capsys.readouterr().err
    assert len(json.loads((tmp_path / "grid_guided.json").read_text())) == 60


def test_analyze_fau(trained, synth_dir, tmp_path):
    rc = main(["analyze-fau", "--weights", str(trained / "weights.zbcnn"), "--manifest",
               str(synth_dir / "manifest.csv"), "--filters", "0,1,2", "--out", str(tmp_path)])
    assert rc == 0
    rows = (tmp_path / "kl_report.csv").read_text().splitlines()[1:]
    tops = [r.split(",")[0] for r in rows if r.endswith(",1")]
    assert sorted(tops) == ["0", "1", "2"]
    assert (tmp_path / "bars" / "filter_001.png").is_file()
    assert (tmp_path / "bars" / "filter_001.csv").read_text().startswith("fau_id,fau_name,kl")


def test_analyze_fau_bins_one(trained, synth_dir, tmp_path):
    rc = main(["analyze-fau", "--weights", str(trained / "weights.zbcnn"), "--manifest",
               str(synth_dir / "manifest.csv"), "--bins", "1", "--out", str(tmp_path)])
    assert rc == 1


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--seed", "2", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 8


def test_exit_codes(tmp_path, synth_dir):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["train", "--epochs", "x"]) == 1
    assert main(["train", "--manifest", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.zbcnn").write_bytes(b"garbage")
    assert main(["eval", "--weights", str(tmp_path / "bad.zbcnn"), "--manifest",
                 str(synth_dir / "manifest.csv"), "--out", str(tmp_path)]) == 2
