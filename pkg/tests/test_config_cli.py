import itertools
import subprocess
import sys

import numpy as np
import pytest

from adp import cli
from adp.config import DESK_PRESET, ConfigError, RunConfig, dump_config, load_config
from adp.schedules import main_lr_at, pmoc_lr_at, read_schedule_csv
from adp.training import build_schedules, train

TOY = [
    "schedules.T=3",
    "schedules.periods=[3, 2, 1]",
    "data.num_ids=6",
    "data.P=3",
    "data.K=2",
]


def toy_config(*extra):
    return load_config(None, [*TOY, *extra], preset=DESK_PRESET)


class TestLoadConfig:
    def test_empty_file_gives_published_defaults(self, tmp_path):
        path = tmp_path / "empty.txt"
        path.write_text("")
        cfg = load_config(path)
        assert cfg.model.k == 7 and cfg.model.clone_depth == 4
        assert cfg.losses.w3 == 0.01 and cfg.losses.margin == 0.3
        assert cfg.schedules.gamma_pow == 1.806 and cfg.schedules.eta_min == 0.004
        assert cfg.schedules.periods == [120, 60, 30, 24, 20, 15, 12] and cfg.schedules.T == 120
        assert cfg.data.P == 16 and cfg.data.K == 4

    def test_w3_override(self):
        cfg = load_config(None, ["losses.w3 = 0"])
        assert cfg.losses.w3 == 0.0 and cfg.effective_w3 == 0.0

    def test_wrong_periods_length(self):
        with pytest.raises(ConfigError) as info:
            load_config(None, ["schedules.periods=[120, 60]"])
        assert info.value.key == "schedules.periods"

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("model.depth = 3\n")
        with pytest.raises(ConfigError, match="model.depth"):
            load_config(path)

    def test_unparseable_value(self):
        with pytest.raises(ConfigError, match="model.k"):
            load_config(None, ["model.k=three"])

    def test_precedence(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("# comment\nschedules.eta = 0.05  # trailing\nmodel.d = 12\n")
        cfg = load_config(path, ["model.d=10"], preset=DESK_PRESET)
        assert cfg.schedules.eta == 0.05 and cfg.model.d == 10 and cfg.model.k == 3

    def test_round_trip(self, tmp_path):
        cfg = load_config(None, ["losses.dcml_metric=manhattan", "toggles.enable_pmoc=false"], preset=DESK_PRESET)
        path = tmp_path / "dump.txt"
        path.write_text(dump_config(cfg))
        assert load_config(path) == cfg

    def test_default_round_trip(self, tmp_path):
        path = tmp_path / "dump.txt"
        path.write_text(dump_config(RunConfig()))
        assert load_config(path) == RunConfig()

    def test_toggles_map_to_fallbacks(self):
        cfg = load_config(None, ["toggles.enable_dymain=false", "toggles.enable_dcml=false", "toggles.enable_pmoc=false"])
        assert cfg.effective_dymain_blocks == 0 and cfg.effective_w3 == 0.0
        lrs = build_schedules(cfg).group_lrs(30)
        assert len(set(lrs.values())) == 1


@pytest.mark.parametrize("dymain, dcml, pmoc", list(itertools.product([False, True], repeat=3)))
def test_every_toggle_combination_trains(dymain, dcml, pmoc):
    cfg = toy_config(
        f"toggles.enable_dymain={dymain}", f"toggles.enable_dcml={dcml}", f"toggles.enable_pmoc={pmoc}"
    )
    result = train(cfg)
    assert len(result.history) == 3
    assert all(np.isfinite(r.total) for r in result.history)


def test_baseline_single_branch_trains():
    cfg = toy_config(
        "model.k=1", "schedules.periods=[3]",
        "toggles.enable_dymain=false", "toggles.enable_dcml=false", "toggles.enable_pmoc=false",
    )
    result = train(cfg)
    assert result.model.k == 1 and result.history[-1].dcml == 0.0


class TestScheduleCommand:
    def test_published_defaults(self, tmp_path, capsys):
        out = tmp_path / "s.csv"
        assert cli.main(["schedule", "--paper-defaults", "--csv", str(out)]) == 0
        printed = capsys.readouterr().out
        peak = float(printed.split("global max lr")[1].split()[0])
        assert peak == pytest.approx(0.2559, abs=1e-3)
        cfg = load_config()
        specs = build_schedules(cfg)
        header, rows = read_schedule_csv(out)
        assert header == ["epoch", "main", *(f"branch{b}" for b in range(1, 8))]
        assert len(rows) == 120
        for row in rows:
            e = int(row[0])
            assert abs(row[1] - main_lr_at(specs.main, e)) < 1e-9
            for b, spec in enumerate(specs.branches):
                assert abs(row[2 + b] - pmoc_lr_at(spec, e)) < 1e-9

    def test_single_branch_single_cycle(self, tmp_path):
        out = tmp_path / "s.csv"
        assert cli.main(["schedule", "--set", "model.k=1", "--set", "schedules.periods=[12]", "--csv", str(out)]) == 0
        header, rows = read_schedule_csv(out)
        assert header == ["epoch", "main", "branch1"]
        col = [r[2] for r in rows]
        assert all(a > b for a, b in zip(col, col[1:]))

    def test_rerun_is_identical(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        cli.main(["schedule", "--csv", str(a)])
        cli.main(["schedule", "--csv", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_unwritable_path(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert cli.main(["schedule", "--csv", str(blocker / "s.csv")]) == 2
        assert "cannot write" in capsys.readouterr().err


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--out", str(out)]) == 0
    return out


class TestTrainEval:
    def test_outputs_written(self, run_dir):
        for name in ("config.txt", "metrics.csv", "model.ckpt"):
            assert (run_dir / name).exists()

    def test_logged_lrs_match_schedules(self, run_dir):
        cfg = load_config(run_dir / "config.txt")
        specs = build_schedules(cfg)
        lines = (run_dir / "metrics.csv").read_text().splitlines()
        assert lines[0] == "epoch,total,ce,triplet,dcml,lr_main,lr_b1,lr_b2,lr_b3"
        for line in lines[1:]:
            row = line.split(",")
            e = int(row[0])
            assert abs(float(row[5]) - main_lr_at(specs.main, e)) <= 1e-12
            for b, spec in enumerate(specs.branches):
                assert abs(float(row[6 + b]) - pmoc_lr_at(spec, e)) <= 1e-12

    def test_loss_decreases(self, run_dir):
        rows = [line.split(",") for line in (run_dir / "metrics.csv").read_text().splitlines()[1:]]
        assert len(rows) == 12 and float(rows[-1][1]) < float(rows[0][1])

    def test_eval_is_deterministic(self, run_dir, capsys):
        args = ["eval", "--out", str(run_dir)]
        assert cli.main(args) == 0
        first = capsys.readouterr().out
        assert cli.main(args) == 0
        assert capsys.readouterr().out == first
        assert "heldout" in first and "heldin" in first

    def test_perfect_features(self, capsys):
        assert cli.main(["eval", "--perfect-features"]) == 0
        out = capsys.readouterr().out
        assert out.count("mAP 1.0000") == 2 and out.count("Rank-1 1.0000") == 2

    def test_checkpoint_architecture_mismatch(self, run_dir, capsys):
        code = cli.main(["eval", "--out", str(run_dir), "--set", "model.k=2", "--set", "schedules.periods=[12, 6]"])
        assert code == 1
        assert "branch.2.classifier" in capsys.readouterr().err

    def test_missing_checkpoint(self, tmp_path):
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.ckpt")]) == 2


def test_invalid_config_exit_code(capsys):
    assert cli.main(["schedule", "--set", "schedules.periods=[12]"]) == 1
    assert "schedules.periods" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts(tmp_path, capsys):
    code = cli.main(["train", "--out", str(tmp_path), "--set", "schedules.eta=1e300"])
    assert code == 2
    assert "non-finite" in capsys.readouterr().err


def test_selftest_negative_control():
    proc = subprocess.run(
        [sys.executable, "-m", "adp", "selftest", "--inject-fault", "chebyshev"],
        capture_output=True, text=True, timeout=300,
    )
    assert proc.returncode != 0
    failing = [line for line in proc.stdout.splitlines() if line.startswith("FAIL")]
    assert any("dcml_oracle" in line for line in failing)
