"""Command-line behavior: config handling, outputs, and exit codes."""

import numpy as np
import pytest

from uprm.cli import RunConfig, main
from uprm.datagen import read_dataset
from uprm.errors import ConfigError


def _cfg_file(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


# ---------------------------------------------------------------------------
# config parsing


def test_config_defaults_and_overrides(tmp_path):
    cfg = RunConfig.load(_cfg_file(tmp_path, """
# comment lines are skipped
seed = 9
optim.alpha = 0.2
lora.enabled = true
profile.name = ucfc-like
"""))
    assert cfg["seed"] == 9
    assert cfg["optim.alpha"] == 0.2
    assert cfg["lora.enabled"] is True
    assert cfg["profile.name"] == "ucfc-like"
    assert cfg["optim.batch_size"] == 8  # untouched default


def test_config_rejects_unknown_key(tmp_path):
    with pytest.raises(ConfigError, match="unknown config key"):
        RunConfig.load(_cfg_file(tmp_path, "no.such.key = 1\n"))


def test_config_rejects_duplicate_key(tmp_path):
    with pytest.raises(ConfigError, match="duplicate"):
        RunConfig.load(_cfg_file(tmp_path, "seed = 1\nseed = 2\n"))


def test_config_rejects_bad_values(tmp_path):
    with pytest.raises(ConfigError, match="seed"):
        RunConfig.load(_cfg_file(tmp_path, "seed = banana\n"))
    with pytest.raises(ConfigError, match="lora.enabled"):
        RunConfig.load(_cfg_file(tmp_path, "lora.enabled = maybe\n"))
    with pytest.raises(ConfigError, match="key = value"):
        RunConfig.load(_cfg_file(tmp_path, "just some words\n"))


def test_config_validate_ranges(tmp_path):
    bad = RunConfig()
    bad.set("optim.epochs", "0")
    with pytest.raises(ConfigError, match="optim.epochs"):
        bad.validate()
    bad = RunConfig()
    bad.set("eval.threshold", "1.5")
    with pytest.raises(ConfigError, match="eval.threshold"):
        bad.validate()
    bad = RunConfig()
    bad.set("ablate.variants", "full no_everything")
    with pytest.raises(ConfigError, match="no_everything"):
        bad.validate()
    bad = RunConfig()
    bad.set("model.d", "30")  # not a multiple of heads=4
    with pytest.raises(ConfigError):
        bad.validate()


def test_config_echo_round_trips(tmp_path):
    cfg = RunConfig()
    cfg.set("seed", "3")
    cfg.set("optim.lr", "0.00123")
    cfg.set("lora.enabled", "true")
    cfg.set("profile.pose_presence_rate", "0.46")
    path = tmp_path / "echo.cfg"
    cfg.echo(path)
    again = RunConfig.load(path)
    assert again.values == cfg.values


def test_flag_beats_config_beats_default(tmp_path, capsys):
    cfg = _cfg_file(tmp_path, "optim.alpha = 0.2\nprofile.video_count = 4\n")
    out = tmp_path / "g"
    rc = main(["gen-data", "--config", cfg, "--alpha", "0.3",
               "--out", str(out)])
    assert rc == 0
    echoed = RunConfig.load(out / "config.txt")
    assert echoed["optim.alpha"] == 0.3
    assert echoed["profile.video_count"] == 4
    assert echoed["optim.batch_size"] == 8


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_prints_profile_rates(tmp_path, capsys):
    rc = main(["gen-data", "--profile", "cuva-like", "--seed", "0",
               "--out", str(tmp_path / "g")])
    assert rc == 0
    lines = capsys.readouterr().out
    assert "pose rate 0.4600" in lines
    assert "background rate 0.2200" in lines
    assert "relation rate 0.3200" in lines
    assert (tmp_path / "g" / "dataset.txt").exists()
    assert (tmp_path / "g" / "config.txt").exists()


def test_gen_data_same_seed_same_bytes(tmp_path):
    cfg = _cfg_file(tmp_path, "profile.video_count = 6\n")
    for name in ("a", "b"):
        assert main(["gen-data", "--config", cfg, "--seed", "4",
                     "--out", str(tmp_path / name)]) == 0
    assert main(["gen-data", "--config", cfg, "--seed", "5",
                 "--out", str(tmp_path / "c")]) == 0
    a = (tmp_path / "a" / "dataset.txt").read_bytes()
    b = (tmp_path / "b" / "dataset.txt").read_bytes()
    c = (tmp_path / "c" / "dataset.txt").read_bytes()
    assert a == b
    assert a != c


def test_gen_data_invalid_rate_exits_2(tmp_path, capsys):
    cfg = _cfg_file(tmp_path, "profile.threat_rate = 1.5\n")
    rc = main(["gen-data", "--config", cfg, "--out", str(tmp_path / "g")])
    assert rc == 2
    assert "threat_rate" in capsys.readouterr().err


def test_unknown_profile_exits_2(tmp_path, capsys):
    rc = main(["gen-data", "--profile", "nope", "--out", str(tmp_path / "g")])
    assert rc == 2
    assert "nope" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# shared tiny run fixtures


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """A small dataset plus full and alpha=0 checkpoints trained on it."""
    root = tmp_path_factory.mktemp("tiny")
    gen_cfg = _cfg_file(root, "profile.video_count = 8\n", "gen.cfg")
    assert main(["gen-data", "--config", gen_cfg, "--seed", "5",
                 "--out", str(root / "data")]) == 0
    data = root / "data" / "dataset.txt"
    train_cfg = _cfg_file(
        root, f"data = {data}\noptim.epochs = 1\noptim.batch_size = 4\n",
        "train.cfg")
    assert main(["train", "--config", train_cfg, "--seed", "1",
                 "--out", str(root / "full")]) == 0
    assert main(["train", "--config", train_cfg, "--seed", "1",
                 "--alpha", "0", "--out", str(root / "noptr")]) == 0
    return root, data, train_cfg


# ---------------------------------------------------------------------------
# train


def test_train_writes_checkpoint_and_trace(tiny_run):
    root, _, _ = tiny_run
    ckpt = root / "full" / "model.ckpt"
    trace = root / "full" / "trace.txt"
    assert ckpt.exists() and trace.exists()
    lines = trace.read_text().splitlines()
    assert len(lines) == 2  # 8 videos / batch 4, one epoch
    steps = [int(l.split()[0]) for l in lines]
    assert steps == [0, 1]
    assert ckpt.read_text().startswith('{"dims"')


def test_train_same_seed_identical_checkpoints(tiny_run, tmp_path):
    root, _, train_cfg = tiny_run
    assert main(["train", "--config", train_cfg, "--seed", "1",
                 "--out", str(tmp_path / "again")]) == 0
    assert ((tmp_path / "again" / "model.ckpt").read_bytes()
            == (root / "full" / "model.ckpt").read_bytes())


def test_train_alpha_zero_changes_checkpoint(tiny_run):
    root, _, _ = tiny_run
    assert ((root / "full" / "model.ckpt").read_bytes()
            != (root / "noptr" / "model.ckpt").read_bytes())


def test_train_threads_do_not_change_result(tiny_run, tmp_path, monkeypatch):
    _, _, train_cfg = tiny_run
    monkeypatch.setenv("UPRM_THREADS", "1")
    assert main(["train", "--config", train_cfg, "--seed", "1",
                 "--out", str(tmp_path / "t1")]) == 0
    monkeypatch.setenv("UPRM_THREADS", "3")
    assert main(["train", "--config", train_cfg, "--seed", "1",
                 "--out", str(tmp_path / "t3")]) == 0
    assert ((tmp_path / "t1" / "model.ckpt").read_bytes()
            == (tmp_path / "t3" / "model.ckpt").read_bytes())


def test_bad_thread_env_exits_2(tiny_run, tmp_path, monkeypatch, capsys):
    _, _, train_cfg = tiny_run
    monkeypatch.setenv("UPRM_THREADS", "0")
    rc = main(["train", "--config", train_cfg, "--seed", "1",
               "--out", str(tmp_path / "t0")])
    assert rc == 2
    assert "UPRM_THREADS" in capsys.readouterr().err


def test_train_missing_data_key_exits_2(tmp_path, capsys):
    rc = main(["train", "--out", str(tmp_path / "t")])
    assert rc == 2
    assert "data" in capsys.readouterr().err


def test_train_malformed_dataset_exits_3(tmp_path, capsys):
    junk = tmp_path / "junk.txt"
    junk.write_text("this is not a dataset\n")
    cfg = _cfg_file(tmp_path, f"data = {junk}\n")
    rc = main(["train", "--config", cfg, "--out", str(tmp_path / "t")])
    assert rc == 3


# ---------------------------------------------------------------------------
# eval


def test_eval_writes_report_with_cause_rows(tiny_run, tmp_path, capsys):
    root, data, _ = tiny_run
    cfg = _cfg_file(tmp_path,
                    f"data = {data}\nckpt = {root / 'full' / 'model.ckpt'}\n")
    rc = main(["eval", "--config", cfg, "--out", str(tmp_path / "e")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "FNR" in out and "F2" in out and "mAP@0.5" in out
    causes = {c for v in read_dataset(data) for _, _, c in v.ground_truth}
    for c in causes:
        assert f"cause-{c}" in out
    report = (tmp_path / "e" / "report.txt").read_text()
    assert "overall.f2=" in report


def test_eval_untrained_checkpoint_no_crash(tiny_run, tmp_path):
    import numpy as np
    from uprm.training import init_model, write_checkpoint
    _, data, _ = tiny_run
    ckpt = tmp_path / "raw.ckpt"
    write_checkpoint(init_model(np.random.default_rng(0)), ckpt)
    cfg = _cfg_file(tmp_path, f"data = {data}\nckpt = {ckpt}\n")
    rc = main(["eval", "--config", cfg, "--out", str(tmp_path / "e")])
    assert rc == 0
    text = (tmp_path / "e" / "report.txt").read_text()
    f2 = float(next(l for l in text.splitlines()
                    if l.startswith("overall.f2=")).split("=")[1])
    assert 0.0 <= f2 <= 1.0


def test_eval_missing_ckpt_key_exits_2(tiny_run, tmp_path, capsys):
    _, data, _ = tiny_run
    cfg = _cfg_file(tmp_path, f"data = {data}\n")
    rc = main(["eval", "--config", cfg, "--out", str(tmp_path / "e")])
    assert rc == 2
    assert "ckpt" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# ablate


def test_ablate_emits_full_and_every_variant(tiny_run, tmp_path, capsys):
    _, data, _ = tiny_run
    cfg = _cfg_file(tmp_path,
                    f"data = {data}\noptim.epochs = 1\noptim.batch_size = 8\n")
    rc = main(["ablate", "--config", cfg, "--out", str(tmp_path / "a")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "eval_data not set" in out
    table = (tmp_path / "a" / "ablation.txt").read_text()
    rows = [l.split("  ")[0] for l in table.splitlines()[2:]]
    assert rows == ["full", "w/o HPE", "w/o ORE", "w/o VBE", "w/o UPE",
                    "w/o PTR"]


def test_ablate_unknown_variant_exits_2(tiny_run, tmp_path, capsys):
    _, data, _ = tiny_run
    cfg = _cfg_file(tmp_path, f"data = {data}\nablate.variants = full no_x\n")
    rc = main(["ablate", "--config", cfg, "--out", str(tmp_path / "a")])
    assert rc == 2
    assert "no_x" in capsys.readouterr().err


def test_ablate_uses_held_out_split_when_given(tiny_run, tmp_path, capsys):
    root, data, _ = tiny_run
    gen_cfg = _cfg_file(tmp_path, "profile.video_count = 4\n", "g.cfg")
    assert main(["gen-data", "--config", gen_cfg, "--seed", "99",
                 "--out", str(tmp_path / "held")]) == 0
    cfg = _cfg_file(tmp_path, "\n".join([
        f"data = {data}",
        f"eval_data = {tmp_path / 'held' / 'dataset.txt'}",
        "optim.epochs = 1",
        "ablate.variants = full",
    ]))
    rc = main(["ablate", "--config", cfg, "--out", str(tmp_path / "a")])
    assert rc == 0
    assert "eval_data not set" not in capsys.readouterr().out


# ---------------------------------------------------------------------------
# inspect-router


def test_inspect_router_table_format(tiny_run, tmp_path, capsys):
    root, data, _ = tiny_run
    cfg = _cfg_file(tmp_path, "\n".join([
        f"data = {data}",
        f"ckpt = {root / 'full' / 'model.ckpt'}",
        f"ckpt_no_ptr = {root / 'noptr' / 'model.ckpt'}",
    ]))
    rc = main(["inspect-router", "--config", cfg, "--out", str(tmp_path / "r")])
    assert rc == 0
    table = (tmp_path / "r" / "router.txt").read_text().splitlines()
    header = table[0].split()
    assert header == ["model", "pose", "relation", "background", "coarse",
                      "fine-entropy"]
    for line in table[2:]:
        shares = [float(x) for x in line.split()[-5:-1]]
        # table cells carry 4 decimals, so the sum only holds to rounding
        assert abs(sum(shares) - 1.0) <= 2.5e-4, line
    assert table[2].startswith("full")
    assert table[3].startswith("w/o PTR")
    # the underlying utilization vector sums to 1 exactly
    from uprm.router import expert_utilization
    from uprm.training import model_forward, read_checkpoint
    params, _ = read_checkpoint(root / "full" / "model.ckpt")
    videos = read_dataset(data)
    shares = expert_utilization([model_forward(params, v)[2] for v in videos])
    assert abs(shares.sum() - 1.0) <= 1e-9


def test_inspect_router_requires_both_checkpoints(tiny_run, tmp_path, capsys):
    root, data, _ = tiny_run
    cfg = _cfg_file(tmp_path, "\n".join([
        f"data = {data}", f"ckpt = {root / 'full' / 'model.ckpt'}"]))
    rc = main(["inspect-router", "--config", cfg, "--out", str(tmp_path / "r")])
    assert rc == 2
    assert "ckpt_no_ptr" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# grad-check


def test_grad_check_passes_and_reports(tmp_path, capsys):
    cfg = _cfg_file(tmp_path, "grad.seeds = 2\n")
    rc = main(["grad-check", "--config", cfg, "--out", str(tmp_path / "g")])
    assert rc == 0
    table = (tmp_path / "g" / "grad_report.txt").read_text().splitlines()
    assert table[0].split() == ["op", "seeds", "max-rel-error", "status"]
    body = table[2:]
    assert len(body) >= 15
    for line in body:
        cells = line.split()
        assert cells[-1] == "PASS"
        assert float(cells[-2]) < 1e-4  # the column parses as a number
    assert "all" in capsys.readouterr().out


def test_grad_check_corrupted_adjoint_fails_with_name(tmp_path, capsys):
    cfg = _cfg_file(tmp_path,
                    "grad.seeds = 1\ngrad.corrupt_case = gated_combine\n")
    rc = main(["grad-check", "--config", cfg, "--out", str(tmp_path / "g")])
    assert rc == 4
    captured = capsys.readouterr()
    assert "gated_combine" in captured.err
    table = (tmp_path / "g" / "grad_report.txt").read_text()
    row = next(l for l in table.splitlines() if l.startswith("gated_combine"))
    assert row.split()[-1] == "FAIL"


def test_grad_check_unknown_corrupt_case_exits_2(tmp_path, capsys):
    cfg = _cfg_file(tmp_path, "grad.corrupt_case = nothing\n")
    rc = main(["grad-check", "--config", cfg, "--out", str(tmp_path / "g")])
    assert rc == 2
    assert "nothing" in capsys.readouterr().err
