"""End-to-end command-line tests: artifacts, exit codes, reproducibility."""

import csv
import json
import time
import xml.etree.ElementTree as ET

import pytest

from pfrnn import cli
from pfrnn.training import ABLATION_VARIANTS, load_checkpoint


SMOKE_CFG = """\
# tiny particle model, quick epochs
kind = pf_lstm
hidden = 8
n_particles = 4
encoder_width = 8
map_feat = 6
map_channels = 2,2

lr = 1e-3
batch_size = 2
epochs = 2
seed = 0
data = {data}
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    rc = run("gen-data", "--maze-size", 6, "--num-traj", 10,
             "--traj-len", 8, "--seed", 3, "--out", root / "data")
    assert rc == 0
    (root / "smoke.cfg").write_text(SMOKE_CFG.format(data=root / "data"))
    return root


@pytest.fixture(scope="module")
def trained(workdir):
    out = workdir / "run"
    started = time.monotonic()
    rc = run("train", "--config", workdir / "smoke.cfg", "--out", out)
    elapsed = time.monotonic() - started
    assert rc == 0
    assert elapsed < 60.0
    return out


def read_manifest(path, drop_times=True):
    with open(path) as fh:
        manifest = json.load(fh)
    if drop_times:
        manifest.pop("written_at")
        manifest.pop("written_at_unix")
    return manifest


class TestGenData:
    def test_split_line_counts(self, workdir):
        lines = (workdir / "data" / "train.jsonl").read_text().splitlines()
        assert len(lines) == 10
        assert len((workdir / "data" / "val.jsonl").read_text().splitlines()) == 1
        assert len((workdir / "data" / "test.jsonl").read_text().splitlines()) == 2

    def test_num_traj_gives_that_many_train_lines(self, tmp_path):
        rc = run("gen-data", "--maze-size", 6, "--num-traj", 100,
                 "--traj-len", 5, "--seed", 1, "--out", tmp_path / "d")
        assert rc == 0
        lines = (tmp_path / "d" / "train.jsonl").read_text().splitlines()
        assert len(lines) == 100

    def test_default_size_has_five_landmarks(self, tmp_path):
        rc = run("gen-data", "--num-traj", 2, "--traj-len", 3,
                 "--seed", 0, "--out", tmp_path / "d")
        assert rc == 0
        meta = json.loads((tmp_path / "d" / "metadata.json").read_text())
        assert meta["n"] == 10
        assert len(meta["landmarks"]) >= 5

    def test_identical_invocations_identical_content(self, workdir, tmp_path):
        rc = run("gen-data", "--maze-size", 6, "--num-traj", 10,
                 "--traj-len", 8, "--seed", 3, "--out", tmp_path / "d")
        assert rc == 0
        for name in ("train.jsonl", "val.jsonl", "test.jsonl", "metadata.json"):
            assert (tmp_path / "d" / name).read_bytes() == \
                (workdir / "data" / name).read_bytes()

    def test_env_seed_fallback(self, workdir, tmp_path, monkeypatch):
        monkeypatch.setenv("PFRNN_SEED", "3")
        rc = run("gen-data", "--maze-size", 6, "--num-traj", 10,
                 "--traj-len", 8, "--out", tmp_path / "d")
        assert rc == 0
        assert (tmp_path / "d" / "train.jsonl").read_bytes() == \
            (workdir / "data" / "train.jsonl").read_bytes()

    def test_manifest_written_with_seed(self, workdir):
        manifest = read_manifest(workdir / "data" / "manifest.json")
        assert manifest["command"] == "gen-data"
        assert manifest["seeds"] == [3]

    def test_unwritable_out_is_io_error(self, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("a file, not a directory\n")
        assert run("gen-data", "--num-traj", 2, "--traj-len", 3,
                   "--out", blocker / "sub") == 3

    def test_bad_count_rejected(self, tmp_path):
        assert run("gen-data", "--num-traj", 0, "--out", tmp_path / "d") == 2


class TestTrain:
    def test_smoke_artifacts(self, workdir, trained):
        assert (trained / "checkpoint.ckpt").exists()
        assert (trained / "manifest.json").exists()
        with open(trained / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["epoch"] for r in rows] == ["0", "1"]

    def test_rerun_bit_identical(self, workdir, trained, tmp_path):
        rc = run("train", "--config", workdir / "smoke.cfg",
                 "--out", tmp_path / "r")
        assert rc == 0
        assert (tmp_path / "r" / "checkpoint.ckpt").read_bytes() == \
            (trained / "checkpoint.ckpt").read_bytes()
        assert (tmp_path / "r" / "metrics.csv").read_bytes() == \
            (trained / "metrics.csv").read_bytes()

    def test_flag_overrides_config(self, workdir, tmp_path):
        rc = run("train", "--config", workdir / "smoke.cfg",
                 "--out", tmp_path / "r", "--epochs", 1,
                 "--set", "hidden=12", "--set", "n_particles=2")
        assert rc == 0
        ckpt = load_checkpoint(tmp_path / "r" / "checkpoint.ckpt")
        assert ckpt.spec.hidden == 12
        assert ckpt.spec.n_particles == 2
        assert len(ckpt.history) == 1
        manifest = read_manifest(tmp_path / "r" / "manifest.json")
        assert manifest["config"]["model"]["hidden"] == 12

    def test_unknown_config_key(self, workdir, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("kind = lstm\nnot_a_key = 5\n")
        assert run("train", "--config", cfg, "--out", tmp_path / "r") == 2
        assert "not_a_key" in capsys.readouterr().err

    def test_bad_value_rejected(self, workdir, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(f"kind = pf_lstm\nhidden = eight\ndata = {workdir/'data'}\n")
        assert run("train", "--config", cfg, "--out", tmp_path / "r") == 2

    def test_missing_dataset_dir(self, workdir, tmp_path):
        assert run("train", "--config", workdir / "smoke.cfg",
                   "--data", tmp_path / "nowhere", "--out", tmp_path / "r") == 3

    def test_missing_data_key(self, tmp_path):
        cfg = tmp_path / "no_data.cfg"
        cfg.write_text("kind = lstm\n")
        assert run("train", "--config", cfg, "--out", tmp_path / "r") == 2

    def test_nan_input_aborts_with_code_4(self, workdir, tmp_path):
        poison = tmp_path / "poison"
        poison.mkdir()
        lines = (workdir / "data" / "train.jsonl").read_text().splitlines()
        rec = json.loads(lines[0])
        rec["obs"][2][1] = float("nan")
        lines[0] = json.dumps(rec)
        (poison / "train.jsonl").write_text("\n".join(lines) + "\n")
        for name in ("val.jsonl", "test.jsonl", "metadata.json"):
            (poison / name).write_bytes((workdir / "data" / name).read_bytes())
        out = tmp_path / "r"
        assert run("train", "--config", workdir / "smoke.cfg",
                   "--data", poison, "--out", out) == 4
        # manifest and last-good checkpoint still land on disk
        assert (out / "manifest.json").exists()
        assert load_checkpoint(out / "checkpoint.ckpt").diverged

    def test_seed_flag_beats_config(self, workdir, tmp_path):
        rc = run("train", "--config", workdir / "smoke.cfg",
                 "--out", tmp_path / "r", "--seed", 5, "--epochs", 1)
        assert rc == 0
        manifest = read_manifest(tmp_path / "r" / "manifest.json")
        assert manifest["seeds"] == [5]
        assert manifest["config"]["train"]["seed"] == 5


class TestEval:
    def test_prints_last_step_mse_json(self, workdir, trained, capsys):
        rc = run("eval", "--checkpoint", trained / "checkpoint.ckpt",
                 "--data", workdir / "data")
        assert rc == 0
        result = json.loads(capsys.readouterr().out)
        assert "last_step_mse" in result
        assert result["last_step_mse"] > 0
        assert len(result["per_seed"]) == 3

    def test_eval_seeds_flag(self, workdir, trained, capsys):
        rc = run("eval", "--checkpoint", trained / "checkpoint.ckpt",
                 "--data", workdir / "data", "--eval-seeds", "7")
        assert rc == 0
        assert len(json.loads(capsys.readouterr().out)["per_seed"]) == 1

    def test_out_dir_gets_json_and_manifest(self, workdir, trained, tmp_path,
                                            capsys):
        out = tmp_path / "e"
        rc = run("eval", "--checkpoint", trained / "checkpoint.ckpt",
                 "--data", workdir / "data", "--out", out)
        assert rc == 0
        printed = json.loads(capsys.readouterr().out)
        saved = json.loads((out / "eval.json").read_text())
        assert saved == printed
        assert read_manifest(out / "manifest.json")["command"] == "eval"

    def test_checkpoint_from_other_map_rejected(self, workdir, trained,
                                                tmp_path):
        rc = run("gen-data", "--maze-size", 7, "--num-traj", 2,
                 "--traj-len", 3, "--seed", 3, "--out", tmp_path / "d7")
        assert rc == 0
        assert run("eval", "--checkpoint", trained / "checkpoint.ckpt",
                   "--data", tmp_path / "d7") == 2

    def test_garbage_checkpoint_rejected(self, workdir, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint")
        assert run("eval", "--checkpoint", bad, "--data", workdir / "data") == 2


class TestAblate:
    def test_ten_row_csv(self, workdir, tmp_path):
        out = tmp_path / "a"
        rc = run("ablate", "--config", workdir / "smoke.cfg", "--out", out,
                 "--epochs", 1)
        assert rc == 0
        with open(out / "ablation.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["variant"] for r in rows] == list(ABLATION_VARIANTS)
        assert all(r["status"] == "ok" for r in rows)

    def test_workers_do_not_change_results(self, workdir, tmp_path):
        outs = []
        for workers in (1, 2):
            out = tmp_path / f"w{workers}"
            rc = run("ablate", "--config", workdir / "smoke.cfg", "--out", out,
                     "--epochs", 1, "--workers", workers)
            assert rc == 0
            outs.append((out / "ablation.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_baseline_base_spec_rejected(self, workdir, tmp_path):
        cfg = tmp_path / "b.cfg"
        cfg.write_text(f"kind = lstm\ndata = {workdir / 'data'}\n")
        assert run("ablate", "--config", cfg, "--out", tmp_path / "a") == 2


class TestPlot:
    def test_loss_curves_svg(self, trained, tmp_path):
        out = tmp_path / "p"
        rc = run("plot", "--metrics", trained / "metrics.csv", "--out", out)
        assert rc == 0
        tree = ET.parse(out / "loss_curves.svg")
        polylines = [e for e in tree.iter()
                     if e.tag.endswith("polyline")]
        assert len(polylines) >= 2  # train loss and validation MSE

    def test_frames_have_exactly_k_particle_markers(self, workdir, trained,
                                                    tmp_path):
        out = tmp_path / "p"
        rc = run("plot", "--checkpoint", trained / "checkpoint.ckpt",
                 "--data", workdir / "data", "--max-frames", 2, "--out", out)
        assert rc == 0
        for name in ("frame_000.svg", "frame_001.svg"):
            tree = ET.parse(out / name)
            marks = [e for e in tree.iter() if e.get("class") == "particle"]
            assert len(marks) == 4  # smoke config n_particles
            assert [e for e in tree.iter() if e.get("class") == "truth"]
            assert [e for e in tree.iter() if e.get("class") == "mean"]

    def test_ablation_csv_becomes_bar_chart(self, workdir, tmp_path):
        csv_path = tmp_path / "abl.csv"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["variant",
                                                    "test_last_step_mse"])
            writer.writeheader()
            for i, name in enumerate(ABLATION_VARIANTS):
                writer.writerow({"variant": name,
                                 "test_last_step_mse": 0.1 * (i + 1)})
        out = tmp_path / "p"
        assert run("plot", "--metrics", csv_path, "--out", out) == 0
        tree = ET.parse(out / "comparison.svg")
        bars = [e for e in tree.iter() if e.get("class") == "bar"]
        assert len(bars) == len(ABLATION_VARIANTS)

    def test_empty_csv_exits_2(self, tmp_path, capsys):
        empty = tmp_path / "empty.csv"
        empty.write_text("a,b\n")
        assert run("plot", "--metrics", empty, "--out", tmp_path / "p") == 2
        assert "empty" in capsys.readouterr().err

    def test_missing_columns_exit_2(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,2\n")
        assert run("plot", "--metrics", bad, "--out", tmp_path / "p") == 2

    def test_traj_index_out_of_range(self, workdir, trained, tmp_path):
        assert run("plot", "--checkpoint", trained / "checkpoint.ckpt",
                   "--data", workdir / "data", "--traj-index", 99,
                   "--out", tmp_path / "p") == 2

    def test_checkpoint_without_data(self, trained, tmp_path):
        assert run("plot", "--checkpoint", trained / "checkpoint.ckpt",
                   "--out", tmp_path / "p") == 2

    def test_nothing_to_plot(self, tmp_path):
        assert run("plot", "--out", tmp_path / "p") == 2


class TestParser:
    def test_unknown_flag_is_an_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("gen-data", "--out", tmp_path / "d", "--frobnicate")
        assert exc.value.code == 2

    def test_missing_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            run()
        assert exc.value.code == 2

    @pytest.mark.parametrize("command,flags", [
        ("gen-data", ["--maze-size", "--num-traj", "--traj-len", "--seed",
                      "--out"]),
        ("train", ["--config", "--out", "--data", "--seed", "--epochs",
                   "--set"]),
        ("eval", ["--checkpoint", "--data", "--split", "--eval-seeds",
                  "--out"]),
        ("ablate", ["--config", "--out", "--workers", "--data", "--seed",
                    "--epochs", "--set"]),
        ("plot", ["--metrics", "--checkpoint", "--data", "--split",
                  "--traj-index", "--max-frames", "--seed", "--out"]),
    ])
    def test_help_lists_all_flags(self, command, flags, capsys):
        with pytest.raises(SystemExit) as exc:
            run(command, "--help")
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for flag in flags:
            assert flag in text

    def test_bad_env_seed_rejected(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PFRNN_SEED", "not-a-number")
        assert run("gen-data", "--num-traj", 2, "--traj-len", 3,
                   "--out", tmp_path / "d") == 2
