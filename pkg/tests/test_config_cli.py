import csv
import io

import numpy as np
import pytest

from dark.cli import main
from dark.config import ConfigError, load_config, parse_config
from dark.data import write_u8_atomic
from dark.model import ModelConfig, build_model, count_parameters
from dark.serialization import save_weights

TINY_CFG = "[model]\nn_feat = 8\nn_mmrb = 1\n"


# ------------------------------------------------------------------- config


def test_empty_config_is_defaults():
    cfg = parse_config("")
    assert cfg.model.n_feat == 32
    assert cfg.schedule.base_lr == 2e-4
    assert cfg.train.mixup_beta == 1.2
    assert cfg == load_config(None)


def test_config_overrides_and_sections():
    cfg = parse_config(
        "# comment\n[model]\nn_feat = 16\n[schedule]\nbase_lr = 1e-4\ntotal_iters = 5000\nfixed_until = 1000\n"
        "[stages]\nstages = [(0, 2, 64), (100, 1, 96)]\n[loss]\nloss_kind = l1\nloss_weight = 2\n"
        "[train]\nuse_mixup = False\n"
    )
    assert cfg.model.n_feat == 16
    assert cfg.schedule.total_iters == 5000
    assert cfg.plan.stages == ((0, 2, 64), (100, 1, 96))
    assert cfg.loss.kind == "l1" and cfg.loss.loss_weight == 2.0
    assert cfg.train.use_mixup is False


@pytest.mark.parametrize(
    "text,match",
    [
        ('n_feat = "big"', r"line 1: 'n_feat' expects int"),
        ("\nn_fet = 3", r"line 2: unknown key 'n_fet'"),
        ("n_feat = 8\nn_feat = 9", "duplicate"),
        ("[nonsense]", "unknown section"),
        ("n_feat 8", "key = value"),
        ("use_mixup = 1", "expects bool"),
        ("stages = [(0, 2)]", "triples"),
        ("n_feat = 0", "n_feat"),
        ("base_lr = [1", "cannot parse"),
    ],
)
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_load_config_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text(TINY_CFG)
    assert load_config(p).model == ModelConfig(n_feat=8, n_mmrb=1)


# ---------------------------------------------------------------------- cli


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_inspect_default(capsys):
    code, out, _ = _run(capsys, "inspect")
    assert code == 0
    total = int(out.strip().splitlines()[-1].split(":")[1])
    assert total == count_parameters(build_model())
    assert "estimator" in out and "1,363" in out


def test_inspect_smaller_config(capsys, tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("n_feat = 16\n")
    _, out, _ = _run(capsys, "inspect", "--config", str(p))
    assert int(out.strip().splitlines()[-1].split(":")[1]) < count_parameters(build_model())


def test_bad_config_reports_line(capsys, tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text('\nn_feat = "big"\n')
    code, _, err = _run(capsys, "inspect", "--config", str(p))
    assert code != 0
    assert "line 2" in err and "n_feat" in err
    assert err.count("\n") == 1


def test_unknown_flag(capsys):
    code, _, err = _run(capsys, "inspect", "--bogus")
    assert code != 0
    assert "usage" in err


def test_missing_subcommand(capsys):
    code, _, err = _run(capsys)
    assert code != 0 and "usage" in err


def test_unreadable_path_named(capsys, tmp_path):
    missing = tmp_path / "nope.bin"
    code, _, err = _run(capsys, "enhance", "--weights", str(missing), "--in", str(tmp_path), "--out", str(tmp_path))
    assert code == 1
    assert str(missing) in err and err.startswith("error:")


@pytest.fixture
def tiny_weights(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    w = tmp_path / "tiny.bin"
    save_weights(build_model(ModelConfig(n_feat=8, n_mmrb=1), seed=1), w)
    return w, cfg


def test_enhance_directory(capsys, tmp_path, tiny_weights, monkeypatch):
    w, cfg = tiny_weights
    src = tmp_path / "in"
    src.mkdir()
    r = np.random.default_rng(0)
    names = ["a.png", "b.png", "c.png"]
    for n in names:
        write_u8_atomic(r.integers(0, 80, (12, 14, 3)).astype(np.uint8), src / n)
    monkeypatch.setenv("DARK_THREADS", "2")
    code, out, _ = _run(capsys, "enhance", "--weights", str(w), "--config", str(cfg), "--in", str(src),
                        "--out", str(tmp_path / "out"), "--hist")
    assert code == 0
    produced = sorted(p.name for p in (tmp_path / "out").iterdir() if not p.name.endswith(".csv"))
    assert produced == names
    hist = (tmp_path / "out" / "a_output_hist.csv").read_text()
    rows = list(csv.reader(io.StringIO(hist)))
    assert sum(int(r[1]) for r in rows[1:]) == 12 * 14
    assert (tmp_path / "out" / "a_input_hist.csv").exists()


def test_enhance_weight_config_mismatch(capsys, tmp_path, tiny_weights):
    w, _ = tiny_weights
    img = tmp_path / "x.png"
    write_u8_atomic(np.zeros((8, 8, 3), np.uint8), img)
    code, _, err = _run(capsys, "enhance", "--weights", str(w), "--in", str(img), "--out", str(tmp_path / "y.png"))
    assert code == 1 and "input_conv.weight" in err


def test_eval_identity_on_matching_pairs(capsys, tmp_path):
    for sub in ("low", "high"):
        (tmp_path / "test" / sub).mkdir(parents=True)
    for i in range(2):
        img = np.random.default_rng(i).integers(0, 256, (16, 16, 3)).astype(np.uint8)
        write_u8_atomic(img, tmp_path / "test" / "low" / f"{i}.png")
        write_u8_atomic(img, tmp_path / "test" / "high" / f"{i}.png")
    report = tmp_path / "r.csv"
    code, out, _ = _run(capsys, "eval", "--identity", "--data", str(tmp_path), "--report", str(report))
    assert code == 0
    last = report.read_text().strip().splitlines()[-1].split(",")
    assert last[0] == "mean" and float(last[2]) == 1.0 and float(last[1]) == 100.0


def test_eval_with_weights(capsys, tmp_path, tiny_weights, lol_dir):
    w, cfg = tiny_weights
    report = tmp_path / "r.csv"
    code, out, _ = _run(capsys, "eval", "--weights", str(w), "--config", str(cfg), "--data", str(lol_dir),
                        "--report", str(report))
    assert code == 0
    assert len(report.read_text().strip().splitlines()) == 1 + 2 + 1
    assert "mean" in out


def test_eval_needs_weights(capsys, lol_dir):
    code, _, err = _run(capsys, "eval", "--data", str(lol_dir))
    assert code == 1 and "--weights" in err


def test_hist_command(capsys, tmp_path):
    img = tmp_path / "x.png"
    write_u8_atomic(np.zeros((5, 4, 3), np.uint8), img)
    code, _, _ = _run(capsys, "hist", "--in", str(img), "--out", str(tmp_path / "h.csv"))
    assert code == 0
    assert (tmp_path / "h.csv").read_text().splitlines()[1] == "0,20,20,20"


def test_gradcheck_exit_status(capsys, monkeypatch):
    import dark.gradcheck as gc

    class R:
        def __init__(self, ok):
            self.name, self.ok, self.max_rel_error = "case", ok, 0.0 if ok else 1.0

    monkeypatch.setattr(gc, "run_suite", lambda seed: [R(True), R(True)])
    assert _run(capsys, "gradcheck")[0] == 0
    monkeypatch.setattr(gc, "run_suite", lambda seed: [R(True), R(False)])
    code, out, _ = _run(capsys, "gradcheck", "--seed", "3")
    assert code == 1 and "FAIL" in out


def test_train_command_short_run(capsys, tmp_path, lol_dir):
    cfg = tmp_path / "t.cfg"
    cfg.write_text(TINY_CFG + "[stages]\nstages = [(0, 2, 16)]\n[train]\ncheckpoint_every = 2\neval_every = 0\n")
    out_dir = tmp_path / "run"
    code, out, _ = _run(capsys, "train", "--data", str(lol_dir), "--out", str(out_dir), "--config", str(cfg),
                        "--iters", "3")
    assert code == 0
    assert (out_dir / "weights_final.bin").exists()
    assert (out_dir / "checkpoint_0000002.ckpt").exists()
    code, _, _ = _run(capsys, "train", "--data", str(lol_dir), "--out", str(out_dir), "--config", str(cfg),
                      "--iters", "4", "--resume", str(out_dir / "checkpoint_0000003.ckpt"))
    assert code == 0
    assert (out_dir / "checkpoint_0000004.ckpt").exists()
