import csv
import hashlib
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from emofuse import cli
from emofuse.audio import Waveform, write_wav

from conftest import make_wav_bytes


def run_cli(*args) -> int:
    return cli.main([str(a) for a in args])


def file_hashes(root: Path) -> dict[str, str]:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def synth_small(out_dir, seed=7, counts="12,10,8,8,6,6", dim=12):
    code = run_cli(
        "synth", "--classes", 6, "--counts", counts, "--dim", dim,
        "--speech-frames", "3:6", "--text-frames", "2:4",
        "--separation", 5.0, "--noise", 1.0, "--seed", seed, "--out", out_dir,
    )
    assert code == 0
    return Path(out_dir)


def write_train_config(path, manifest, out, **overrides):
    values = {
        "manifest": manifest,
        "out": out,
        "split_fraction": "0.25",
        "lr": "1e-3",
        "max_epochs": "4",
        "early_stop_patience": "10",
        "hidden_width": "16",
        "hidden_layers": "2",
        "seed": "3",
    }
    values.update(overrides)
    Path(path).write_text(
        "# training run\n" + "".join(f"{k}={v}\n" for k, v in values.items()), encoding="utf-8"
    )
    return path


class TestSynth:
    def test_writes_manifest_with_all_records(self, tmp_path, capsys):
        out = synth_small(tmp_path / "data")
        rows = list(csv.reader(open(out / "manifest.csv")))
        assert rows[0] == ["id", "speech", "text", "label"]
        assert len(rows) - 1 == 12 + 10 + 8 + 8 + 6 + 6
        assert (out / "classes.txt").exists()
        assert (out / "dataset.png").exists()
        assert "neutral" in capsys.readouterr().out

    def test_same_seed_byte_identical(self, tmp_path):
        a = synth_small(tmp_path / "a", seed=21)
        b = synth_small(tmp_path / "b", seed=21)
        assert file_hashes(a) == file_hashes(b)

    def test_counts_shorter_than_classes_exit_2(self, tmp_path):
        code = run_cli(
            "synth", "--classes", 6, "--counts", "10,10,10,10,10",
            "--seed", 0, "--out", tmp_path / "x",
        )
        assert code == 2

    def test_console_entry_point(self, tmp_path):
        res = subprocess.run(
            [sys.executable, "-m", "emofuse.cli", "synth", "--counts", "2,2,2,2,2,2",
             "--dim", "4", "--seed", "1", "--out", str(tmp_path / "d")],
            capture_output=True, text=True,
        )
        assert res.returncode == 0, res.stderr


class TestAugment:
    def _make_wavs(self, d, n=3):
        d.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(5)
        for i in range(n):
            (d / f"clip{i}.wav").write_bytes(make_wav_bytes(rng.uniform(-0.5, 0.5, size=400).astype(np.float32)))

    def test_probability_zero_round_trips_bytes(self, tmp_path):
        src = tmp_path / "in"
        self._make_wavs(src)
        code = run_cli("augment", "--in", src, "--prob", 0.0, "--seed", 4, "--out", tmp_path / "out")
        assert code == 0
        for p in src.glob("*.wav"):
            assert (tmp_path / "out" / p.name).read_bytes() == p.read_bytes()
        log = list(csv.reader(open(tmp_path / "out" / "augment_log.csv")))
        assert log[0] == ["file", "transform", "parameters"]
        assert all(row[1] == "none" for row in log[1:])

    def test_full_probability_log_deterministic(self, tmp_path):
        src = tmp_path / "in"
        self._make_wavs(src, n=5)
        assert run_cli("augment", "--in", src, "--prob", 1.0, "--seed", 9, "--out", tmp_path / "o1") == 0
        assert run_cli("augment", "--in", src, "--prob", 1.0, "--seed", 9, "--out", tmp_path / "o2") == 0
        assert (tmp_path / "o1" / "augment_log.csv").read_bytes() == (tmp_path / "o2" / "augment_log.csv").read_bytes()
        assert file_hashes(tmp_path / "o1") == file_hashes(tmp_path / "o2")
        log = list(csv.reader(open(tmp_path / "o1" / "augment_log.csv")))
        assert all(row[1] in ("speed", "reverb", "noise") for row in log[1:])

    def test_corrupt_wav_reported_exit_1(self, tmp_path, capsys):
        src = tmp_path / "in"
        self._make_wavs(src, n=2)
        (src / "broken.wav").write_bytes(b"RIFX" + b"\x00" * 40)
        code = run_cli("augment", "--in", src, "--prob", 0.5, "--seed", 0, "--out", tmp_path / "out")
        assert code == 1
        assert "broken.wav" in capsys.readouterr().err
        # the good files still got processed
        assert (tmp_path / "out" / "clip0.wav").exists()


class TestTrain:
    def test_full_run_outputs(self, tmp_path):
        data = synth_small(tmp_path / "data")
        cfgfile = write_train_config(tmp_path / "run.cfg", data / "manifest.csv", tmp_path / "run")
        assert run_cli("train", "--config", cfgfile) == 0
        out = tmp_path / "run"
        for name in (
            "checkpoint.emck", "history.csv", "history.png", "metrics.txt",
            "confusion.csv", "confusion.png", "resolved_config.txt",
            "train_manifest.csv", "val_manifest.csv", "classes.txt",
        ):
            assert (out / name).exists(), name
        rows = list(csv.reader(open(out / "history.csv")))
        assert rows[0] == ["epoch", "train_loss", "val_macro_f1", "lr"]
        assert len(rows) > 1

    def test_unknown_config_key_exit_2(self, tmp_path, capsys):
        data = synth_small(tmp_path / "data")
        cfgfile = write_train_config(tmp_path / "run.cfg", data / "manifest.csv", tmp_path / "run")
        with open(cfgfile, "a") as fh:
            fh.write("learning_rate_warmup=5\n")
        assert run_cli("train", "--config", cfgfile) == 2
        assert "learning_rate_warmup" in capsys.readouterr().err

    def test_missing_class_exit_1(self, tmp_path, capsys):
        data = synth_small(tmp_path / "data")
        manifest = data / "manifest.csv"
        rows = manifest.read_text().splitlines()
        kept = [rows[0]] + [r for r in rows[1:] if not r.endswith(",fear")]
        manifest.write_text("\n".join(kept) + "\n")
        cfgfile = write_train_config(tmp_path / "run.cfg", manifest, tmp_path / "run")
        assert run_cli("train", "--config", cfgfile) == 1
        assert "fear" in capsys.readouterr().err

    def test_seed_flag_overrides_config(self, tmp_path):
        data = synth_small(tmp_path / "data")
        cfg1 = write_train_config(tmp_path / "a.cfg", data / "manifest.csv", tmp_path / "r1", seed="3")
        cfg2 = write_train_config(tmp_path / "b.cfg", data / "manifest.csv", tmp_path / "r2", seed="4")
        assert run_cli("train", "--config", cfg1, "--seed", 4) == 0
        assert run_cli("train", "--config", cfg2) == 0
        assert (tmp_path / "r1" / "history.csv").read_bytes() == (tmp_path / "r2" / "history.csv").read_bytes()


class TestDeterminism:
    def test_identical_invocations_identical_history(self, tmp_path):
        data = synth_small(tmp_path / "data")
        cfg1 = write_train_config(tmp_path / "a.cfg", data / "manifest.csv", tmp_path / "r1")
        cfg2 = write_train_config(tmp_path / "b.cfg", data / "manifest.csv", tmp_path / "r2")
        assert run_cli("train", "--config", cfg1) == 0
        assert run_cli("train", "--config", cfg2) == 0
        assert (tmp_path / "r1" / "history.csv").read_bytes() == (tmp_path / "r2" / "history.csv").read_bytes()
        assert (tmp_path / "r1" / "checkpoint.emck").read_bytes() == (tmp_path / "r2" / "checkpoint.emck").read_bytes()


class TestEval:
    def test_val_split_macro_f1_matches_history_best(self, tmp_path, capsys):
        data = synth_small(tmp_path / "data")
        cfgfile = write_train_config(tmp_path / "run.cfg", data / "manifest.csv", tmp_path / "run")
        assert run_cli("train", "--config", cfgfile) == 0
        out = tmp_path / "run"
        capsys.readouterr()
        code = run_cli(
            "eval", "--checkpoint", out / "checkpoint.emck", "--manifest", out / "val_manifest.csv",
            "--classes", out / "classes.txt", "--out", tmp_path / "ev",
        )
        assert code == 0
        # exact equality: the history stores round-trippable floats
        rows = list(csv.reader(open(out / "history.csv")))
        best = max(float(r[2]) for r in rows[1:])
        from emofuse.model import load_checkpoint
        from emofuse.dataio import load_manifest
        from emofuse.train import evaluate

        params, meta = load_checkpoint(out / "checkpoint.emck")
        _, val_samples = load_manifest(out / "val_manifest.csv", out / "classes.txt")
        assert evaluate(params, val_samples).macro_f1 == best == meta.best_val_f1
        assert (tmp_path / "ev" / "confusion.csv").exists()
        assert (tmp_path / "ev" / "confusion.png").exists()

    def test_dimension_mismatch_exit_1(self, tmp_path):
        data = synth_small(tmp_path / "data")
        other = synth_small(tmp_path / "other", dim=8)
        cfgfile = write_train_config(tmp_path / "run.cfg", data / "manifest.csv", tmp_path / "run")
        assert run_cli("train", "--config", cfgfile) == 0
        code = run_cli(
            "eval", "--checkpoint", tmp_path / "run" / "checkpoint.emck",
            "--manifest", other / "manifest.csv", "--out", tmp_path / "ev",
        )
        assert code == 1


class TestEnsembleCli:
    def _train_three(self, tmp_path):
        data = synth_small(tmp_path / "data", counts="14,12,10,10,8,8")
        ckpts = []
        for i, seed in enumerate((3, 4, 5)):
            out = tmp_path / f"run{i}"
            cfgfile = write_train_config(tmp_path / f"c{i}.cfg", data / "manifest.csv", out, seed=str(seed))
            assert run_cli("train", "--config", cfgfile) == 0
            ckpts.append(out / "checkpoint.emck")
        return data, ckpts

    def test_two_checkpoints_exit_2(self, tmp_path):
        data, ckpts = self._train_three(tmp_path)
        code = run_cli(
            "ensemble", "--checkpoints", ckpts[0], ckpts[1],
            "--manifest", data / "manifest.csv", "--out", tmp_path / "ens",
        )
        assert code == 2

    def test_three_identical_checkpoints_match_solo(self, tmp_path, capsys):
        data, ckpts = self._train_three(tmp_path)
        copies = []
        for i in range(3):
            c = tmp_path / f"copy{i}.emck"
            shutil.copy(ckpts[0], c)
            copies.append(c)
        capsys.readouterr()
        code = run_cli(
            "ensemble", "--checkpoints", *copies,
            "--manifest", data / "manifest.csv", "--out", tmp_path / "ens",
        )
        assert code == 0
        from emofuse.dataio import load_manifest
        from emofuse.model import load_checkpoint
        from emofuse.train import evaluate
        from emofuse.ensemble import EnsembleMember, ensemble_evaluate

        params, meta = load_checkpoint(ckpts[0])
        _, samples = load_manifest(data / "manifest.csv", data / "classes.txt")
        solo = evaluate(params, samples)
        trio = [EnsembleMember(f"c{i}", params, meta.best_val_f1) for i in range(3)]
        assert ensemble_evaluate(trio, samples).macro_f1 == solo.macro_f1

    def test_distinct_members_report(self, tmp_path, capsys):
        data, ckpts = self._train_three(tmp_path)
        capsys.readouterr()
        code = run_cli(
            "ensemble", "--checkpoints", *ckpts,
            "--manifest", data / "manifest.csv", "--out", tmp_path / "ens",
        )
        out = capsys.readouterr().out
        if code == 2:
            pytest.skip("two member runs landed on an identical validation F1")
        assert code == 0
        assert "ensemble (hard voting)" in out
        assert (tmp_path / "ens" / "confusion.csv").exists()
