import csv
import json
import re

import pytest

from vaue.cli import main


def _summary(out, held=0, seed=0):
    return json.loads((out / "train" / f"heldout{held}" / f"seed{seed}" / "summary.json").read_text())


def _strip_time(d):
    return {k: v for k, v in d.items() if k != "timestamp"}


def test_train_writes_artifacts(tiny_config, tmp_out, capsys):
    assert main(["train", "-c", str(tiny_config), "--seed", "0"]) == 0
    run = tmp_out / "train" / "heldout0" / "seed0"
    s = _summary(tmp_out)
    assert 0.0 <= s["test_acc"] <= 1.0 and s["final_test_acc"] is not None
    assert s["seed"] == 0 and s["config"]["dataset"]["num_classes"] == 3
    assert set(s["per_domain"]) == {"0", "1", "2", "3"}
    lines = (run / "metrics.csv").read_text().splitlines()
    echo = json.loads(lines[0][2:])
    assert echo["seed"] == 0 and echo["config"] == s["config"]
    header = next(csv.reader([lines[1]]))
    assert header[:5] == ["iteration", "train_loss", "val_acc", "test_acc", "mean_u_test"]
    assert {"acc_domain0", "acc_domain1", "acc_domain2", "acc_domain3"} <= set(header)
    assert len(lines) == 4
    assert (run / "checkpoint.vckpt").exists()


def test_train_twice_is_identical(tiny_config, tmp_out):
    assert main(["train", "-c", str(tiny_config), "--seed", "1"]) == 0
    first = _summary(tmp_out, seed=1)
    metrics = (tmp_out / "train" / "heldout0" / "seed1" / "metrics.csv").read_bytes()
    assert main(["train", "-c", str(tiny_config), "--seed", "1"]) == 0
    assert _strip_time(_summary(tmp_out, seed=1)) == _strip_time(first)
    assert (tmp_out / "train" / "heldout0" / "seed1" / "metrics.csv").read_bytes() == metrics


def test_train_missing_dataset_names_it(tiny_config, tmp_path, tmp_out, capsys):
    path = tmp_path / "nodata.toml"
    path.write_text(re.sub(r"\[dataset\][^\[]*", "", tiny_config.read_text()))
    assert main(["train", "-c", str(path)]) == 1
    assert "dataset" in capsys.readouterr().err


def test_train_override_error_names_field(tiny_config, tmp_out, capsys):
    assert main(["train", "-c", str(tiny_config), "--set", "train.iteratons=3"]) == 1
    assert "train.iteratons" in capsys.readouterr().err


def test_train_nonfinite_is_exit_two(tiny_config, tmp_out, capsys):
    assert main(["train", "-c", str(tiny_config), "--seed", "0", "--set", "train.learning_rate=1e300"]) == 2
    assert "numerical" in capsys.readouterr().err


def test_ablate_table_shape(tiny_config, tmp_out, capsys):
    assert main(["ablate", "-c", str(tiny_config), "--set", "experiment.seeds=[1]"]) == 0
    text = (tmp_out / "ablation" / "ablation.csv").read_text().splitlines()
    assert text[0].startswith("# ")
    rows = list(csv.reader(text[1:]))
    assert rows[0] == ["method", "domain0", "domain1", "domain2", "domain3", "Avg"]
    assert [r[0] for r in rows[1:]] == ["VAUE", "VAUE w/o VA", "VAUE w/o EC", "VAUE w/o CD", "VAUE w/o UE"]
    assert all(re.fullmatch(r"\d+\.\d\d ± 0\.00", c) for r in rows[1:] for c in r[1:])
    runs = json.loads((tmp_out / "ablation" / "runs.json").read_text())
    assert len(runs["runs"]) == 20 and runs["seeds"] == [1]


def test_ablate_unknown_variant(tiny_config, tmp_out):
    assert main(["ablate", "-c", str(tiny_config), "--variants", "VAUE w/o XX"]) == 1


def _fuse(tmp_path, capsys, text):
    path = tmp_path / "m.txt"
    path.write_text(text)
    code = main(["fuse", str(path)])
    return code, capsys.readouterr()


def _parse_fuse(out):
    lines = dict(line.split(" = ", 1) for line in out.strip().splitlines())
    return [float(v) for v in lines["b"].split()], float(lines["u"]), lines


def test_fuse_vacuous(tmp_path, capsys):
    code, cap = _fuse(tmp_path, capsys, "0 0 1\n0 0 1\n")
    b, u, _ = _parse_fuse(cap.out)
    assert code == 0 and b == [0.0, 0.0] and u == 1.0


def test_fuse_conflicting_pair(tmp_path, capsys):
    code, cap = _fuse(tmp_path, capsys, "# two opinions\n0.5 0 0.5\n\n0 0.5 0.5\n")
    b, u, lines = _parse_fuse(cap.out)
    assert code == 0
    assert b == pytest.approx([1 / 3, 1 / 3], abs=1e-12) and u == pytest.approx(1 / 3, abs=1e-12)
    assert float(lines["conflicts"]) == pytest.approx(0.25)


def test_fuse_single_line_echoes(tmp_path, capsys):
    code, cap = _fuse(tmp_path, capsys, "0.2 0.3 0.1 0.4\n")
    b, u, lines = _parse_fuse(cap.out)
    assert code == 0 and b == pytest.approx([0.2, 0.3, 0.1]) and u == pytest.approx(0.4)
    assert lines["predicted class"] == "1" and lines["conflicts"] == "none"


def test_fuse_malformed_reports_line(tmp_path, capsys):
    code, cap = _fuse(tmp_path, capsys, "0.5 0 0.5\n0.5 x 0.5\n")
    assert code == 1 and "line 2" in cap.err
    code, cap = _fuse(tmp_path, capsys, "0.5 0.6 0.5\n")
    assert code == 1 and "line 1" in cap.err


def test_fuse_total_conflict_is_exit_two(tmp_path, capsys):
    code, cap = _fuse(tmp_path, capsys, "0.99999999999999 0 1e-14\n0 0.99999999999999 1e-14\n")
    assert code == 2 and "conflict" in cap.err


def test_fuse_missing_file(tmp_path, capsys):
    assert main(["fuse", str(tmp_path / "none.txt")]) == 3


def test_gradcheck_report(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    names = {line.split()[0] for line in out.splitlines()[:-1]}
    assert {"ece_loss", "kl_dirichlet_uniform", "decorrelation_loss", "renormalize", "micro_pipeline"} <= names
    assert "FAIL" not in out


def test_gradcheck_corrupted_case_fails(capsys):
    assert main(["gradcheck", "--corrupt", "decorrelation_loss"]) == 2
    assert re.search(r"decorrelation_loss\s+\S+\s+FAIL", capsys.readouterr().out)
    assert main(["gradcheck", "--corrupt", "nope"]) == 1


def test_data_and_eval(tiny_config, tmp_out, tmp_path, capsys):
    cache = tmp_path / "data.vdat"
    assert main(["data", "-c", str(tiny_config), "--seed", "0", "--out", str(cache)]) == 0
    assert main(["train", "-c", str(tiny_config), "--seed", "0"]) == 0
    ckpt = tmp_out / "train" / "heldout0" / "seed0" / "checkpoint.vckpt"
    capsys.readouterr()
    report_path = tmp_path / "eval.json"
    assert main(["eval", str(ckpt), "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert json.loads(capsys.readouterr().out) == report
    assert report["domains"]["0"]["accuracy"] == pytest.approx(_summary(tmp_out)["test_acc"])
    assert main(["eval", str(ckpt), "--dataset", str(cache)]) == 0
    full = json.loads(capsys.readouterr().out)
    assert set(full["domains"]) == {"0", "1", "2", "3"}
    assert full["domains"]["0"] == report["domains"]["0"]
    assert main(["eval", str(ckpt), "--dataset", str(cache), "--domain", "9"]) == 1
    assert main(["eval", str(tmp_path / "missing.vckpt")]) == 3
