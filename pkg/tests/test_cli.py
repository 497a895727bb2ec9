import re
import subprocess
import sys

import pytest

from distilkit.cli import main
from distilkit.config import ConfigError, load_config, parse_config, profile_text
from distilkit.corpus import CorpusStats
from distilkit.finetune import parse_table
from distilkit.synthetic import fuzz_corpus


def set_keys(text, **values):
    for key, value in values.items():
        text, n = re.subn(rf"^{key} = .*$", f"{key} = {value}", text, flags=re.M)
        assert n, key
    return text


def workspace(tmp_path, **values):
    assert main(["synthesize", str(tmp_path), "--sentences", "60", "--tagged", "50"]) == 0
    cfg = tmp_path / "config.ini"
    defaults = dict(init_mlm_steps=20, max_steps=8)
    cfg.write_text(set_keys(cfg.read_text(), **{**defaults, **values}))
    return cfg


@pytest.mark.parametrize("name", ["full", "desk"])
def test_profiles_round_trip(name, tmp_path):
    cfg = load_config(name)
    cfg.write(tmp_path / "effective.ini")
    assert load_config(tmp_path / "effective.ini") == cfg


def test_full_profile_values():
    cfg = load_config("full")
    assert (cfg.teacher.num_layers, cfg.student.num_layers, cfg.teacher.hidden_size) == (12, 6, 768)
    assert (cfg.pretrain.batch_size, cfg.pretrain.learning_rate, cfg.pretrain.epochs) == (6, 5e-4, 3)
    assert cfg.task("wikiner").folds == 5 and cfg.task("wikiner").epochs == 2
    assert cfg.task("intent").epochs == 14 and cfg.task("isdt").batch_size == 32


def test_depth_constraint_enforced_unless_overridden():
    text = set_keys(profile_text("desk"), num_layers=3)  # first match: [teacher]
    with pytest.raises(ConfigError, match="teacher layers / 2"):
        parse_config(text)
    text = set_keys(profile_text("desk"), allow_depth_override="true")
    text = text.replace("[student]\nnum_layers = 2", "[student]\nnum_layers = 3")
    assert parse_config(text).student.num_layers == 3


def test_unknown_task_named():
    with pytest.raises(ConfigError, match="unknown task 'nope'"):
        load_config("desk").task("nope")


def test_preprocess_golden(tmp_path):
    src = tmp_path / "in.txt"
    long = " ".join(f"w{i}" + ("." if i == 2 else "") for i in range(6))
    src.write_text(f"a b c\n{long}\n")
    assert main(["preprocess", str(src), str(tmp_path / "out.txt"), "--word-limit", "4"]) == 0
    assert (tmp_path / "out.txt").read_text() == "a b c\nw0 w1 w2.\nw3 w4 w5\n"
    assert (tmp_path / "out.txt.stats").read_text() == "sentences: 3\nwords: 9\nover_limit: 0\n"


def test_preprocess_missing_input(tmp_path, capsys):
    assert main(["preprocess", str(tmp_path / "nope.txt"), str(tmp_path / "o.txt")]) == 2
    assert "no such file" in capsys.readouterr().err


def test_preprocess_stats_match_generator_ledger(tmp_path):
    lines, ledger = fuzz_corpus(1000, seed=3)
    (tmp_path / "raw.txt").write_text("".join(x + "\n" for x in lines))
    assert main(["preprocess", str(tmp_path / "raw.txt"), str(tmp_path / "split.txt")]) == 0
    stats = CorpusStats.from_text((tmp_path / "split.txt.stats").read_text())
    assert stats == CorpusStats(ledger.sentences_out, ledger.words, ledger.over_limit)


def prepare(cfg):
    assert main(["preprocess", "--config", str(cfg)]) == 0
    assert main(["build-vocab", "--config", str(cfg)]) == 0


def test_pretrain_zero_epochs_writes_initial_checkpoint_only(tmp_path):
    cfg = workspace(tmp_path)
    prepare(cfg)
    assert main(["pretrain", "--config", str(cfg), "--init-teacher", "--epochs", "0"]) == 0
    ckpts = sorted(p.name for p in (tmp_path / "work" / "checkpoints").glob("student*"))
    assert ckpts == ["student_init.ckpt"]


def test_pretrain_missing_teacher_and_odd_depth(tmp_path, capsys):
    cfg = workspace(tmp_path)
    prepare(cfg)
    assert main(["pretrain", "--config", str(cfg)]) == 2
    assert "teacher.ckpt" in capsys.readouterr().err
    bad = tmp_path / "odd.ini"
    bad.write_text(set_keys(cfg.read_text(), num_layers=3))
    assert main(["pretrain", "--config", str(bad), "--init-teacher"]) == 2
    assert "teacher layers / 2" in capsys.readouterr().err


def test_pretrain_log_is_reproducible(tmp_path):
    logs = []
    for run in ("a", "b"):
        cfg = workspace(tmp_path / run)
        prepare(cfg)
        assert main(["pretrain", "--config", str(cfg), "--init-teacher", "--seed", "3"]) == 0
        logs.append((tmp_path / run / "work" / "checkpoints" / "pretrain.log").read_bytes())
    assert logs[0] == logs[1] and logs[0].count(b"\n") == 9


def test_benchmark_same_checkpoint_gives_equal_f1(tmp_path, capsys):
    cfg = workspace(tmp_path, epochs=1)
    prepare(cfg)
    assert main(["pretrain", "--config", str(cfg), "--init-teacher"]) == 0
    teacher = tmp_path / "work" / "checkpoints" / "teacher.ckpt"
    capsys.readouterr()
    assert main(["benchmark", "--config", str(cfg), "--task", "pos", "--runs", "1",
                 "--student", str(teacher)]) == 0
    rows = parse_table(capsys.readouterr().out)
    assert rows[1][1] == rows[2][1]
    assert rows[3][0].startswith("ratio") and float(rows[3][2]) > 0
    assert (tmp_path / "work" / "reports" / "pos.report.txt").exists()


def test_benchmark_missing_checkpoint(tmp_path, capsys):
    cfg = workspace(tmp_path)
    prepare(cfg)
    assert main(["benchmark", "--config", str(cfg), "--task", "pos"]) == 2
    assert "student.ckpt" in capsys.readouterr().err


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["pretrain", "--bogus"])
    assert exc.value.code == 2


def test_verify_reports_every_suite(capsys):
    assert main(["verify", "--quick"]) == 0
    out = capsys.readouterr().out
    for suite in ("op-gradients", "loss-gradients", "kd-gradient-oracle", "loss-oracles",
                  "loss-combination", "layer-copy", "splitter-fuzz", "f1-oracles"):
        assert re.search(rf"\[PASS\] {suite}: \d+ passed, 0 failed", out), suite


def test_verify_fails_on_injected_sign_flip(monkeypatch, capsys):
    from distilkit import tensor as T
    from distilkit import verify
    original = verify.run_all

    def flipped(t, s, temperature=1.0):
        return T.neg(verify.kd_loss(t, s, temperature))
    monkeypatch.setattr(verify, "run_all", lambda quick=False: original(True, kd_fn=flipped))
    assert main(["verify"]) == 1
    assert "[FAIL] kd-gradient-oracle" in capsys.readouterr().out


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "distilkit.cli", "--help"], capture_output=True,
                         text=True)
    assert out.returncode == 0 and "benchmark" in out.stdout
