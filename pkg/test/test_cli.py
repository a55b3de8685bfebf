# command line surface: subcommands, exit codes and idempotence
import gzip
import json
from pathlib import Path
import shutil
import sys

import numpy as np
import pytest
import yaml

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent / "src" / "anomaly-detector"))

from cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, run
from commands import verify_commands
from commands import eval_commands
from commands.eval_commands import ablation_summary
from dataio import encode_blob, nifti_encode
from datamodels import ModalityMask
from threadpoolctl import threadpool_info

SMOKE = str(Path(__file__).parent.parent / "configs" / "smoke.yaml")


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    code = run(["synth", "--out", str(out), "--seed", "1", "--n-normal", "6", "--n-abnormal", "3", "--size", "16"])
    assert code == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("run") / "model.anyad"
    code = run(["train", "--config", SMOKE, "--data", str(dataset), "--ckpt", str(ckpt), "--seed", "7", "--quiet"])
    assert code == EXIT_OK
    return ckpt


# ============================================================================
# Usage errors
# ============================================================================


class TestUsage:
    def test_no_subcommand(self, capsys):
        assert run([]) == EXIT_USAGE
        assert "error: UsageError" in capsys.readouterr().err

    def test_unknown_flag(self):
        assert run(["verify", "--bogus"]) == EXIT_USAGE

    def test_eval_without_ckpt(self, dataset, capsys):
        assert run(["eval", "--data", str(dataset)]) == EXIT_USAGE
        assert "--ckpt" in capsys.readouterr().err

    def test_bad_combo(self, trained, dataset):
        assert run(["eval", "--ckpt", str(trained), "--data", str(dataset), "--combos", "9"]) == EXIT_USAGE

    def test_zero_threads(self, monkeypatch):
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            monkeypatch.delenv(var, raising=False)
        assert run(["verify", "--suite", "nifti", "--threads", "0"]) == EXIT_USAGE

    def test_unknown_config_key(self, tmp_path, dataset):
        config = tmp_path / "bad.yaml"
        config.write_text("train:\n  stepz: 3\n")
        assert run(["stats", "--config", str(config), "--data", str(dataset), "--ckpt", str(tmp_path / "s.anyad")]) == EXIT_USAGE


# ============================================================================
# Data errors
# ============================================================================


class TestDataErrors:
    def test_corrupt_checkpoint(self, tmp_path, dataset, capsys):
        bad = tmp_path / "bad.anyad"
        bad.write_bytes(b"garbage")
        assert run(["eval", "--ckpt", str(bad), "--data", str(dataset)]) == EXIT_DATA
        assert "CheckpointFormatError" in capsys.readouterr().err

    def test_corrupt_blob(self, tmp_path, trained):
        blob = tmp_path / "x.adsl"
        blob.write_bytes(b"ADSL")
        assert run(["infer", "--ckpt", str(trained), "--data", str(blob), "--out", str(tmp_path)]) == EXIT_DATA

    def test_no_partial_checkpoint_on_failure(self, tmp_path):
        ckpt = tmp_path / "never.anyad"
        missing = tmp_path / "missing"
        assert run(["train", "--config", SMOKE, "--data", str(missing), "--ckpt", str(ckpt), "--quiet"]) == EXIT_USAGE
        assert not ckpt.exists()
        assert not Path(f"{ckpt}.tmp").exists()

    def test_mixed_sample_shapes(self, dataset, trained, tmp_path, capsys):
        copy = tmp_path / "mixed"
        shutil.copytree(dataset, copy)
        blob = next((copy / "blobs").glob("test_normal_*.adsl"))
        blob.write_bytes(encode_blob(np.zeros((3, 8, 8), np.float32)))
        assert run(["eval", "--ckpt", str(trained), "--data", str(copy)]) == EXIT_DATA
        assert "ShapeError" in capsys.readouterr().err

    def test_wrong_channel_count(self, dataset, trained, tmp_path, capsys):
        copy = tmp_path / "two_channel"
        shutil.copytree(dataset, copy)
        for blob in (copy / "blobs").glob("*.adsl"):
            blob.write_bytes(encode_blob(np.zeros((2, 16, 16), np.float32)))
        assert run(["eval", "--ckpt", str(trained), "--data", str(copy)]) == EXIT_DATA
        assert "ShapeError" in capsys.readouterr().err


# ============================================================================
# Pipeline
# ============================================================================


class TestPipeline:
    def test_train_writes_checkpoints_and_ledger(self, trained):
        assert trained.exists()
        assert (trained.parent / "model_step000002.anyad").exists()
        assert (trained.parent / "model_step000004.anyad").exists()
        ledger = yaml.safe_load((trained.parent / "run_ledger.json").read_text())
        assert ledger["runs"]["model.anyad"]["summary"]["seed"] == 7
        assert set(ledger) == {"runs"}

    def test_train_is_deterministic(self, dataset, trained, tmp_path):
        again = tmp_path / "model.anyad"
        assert run(["train", "--config", SMOKE, "--data", str(dataset), "--ckpt", str(again), "--seed", "7", "--quiet"]) == EXIT_OK
        assert again.read_bytes() == trained.read_bytes()

    def test_repeated_train_leaves_outputs_byte_identical(self, dataset, tmp_path):
        ckpt = tmp_path / "model.anyad"
        args = ["train", "--config", SMOKE, "--data", str(dataset), "--ckpt", str(ckpt), "--seed", "7", "--quiet"]
        snapshots = []
        for _ in range(2):
            assert run(args) == EXIT_OK
            snapshots.append({p.name: p.read_bytes() for p in sorted(tmp_path.iterdir()) if p.suffix != ".lock"})
        assert snapshots[0] == snapshots[1]
        assert "run_ledger.json" in snapshots[0]

    def test_eval_leaves_no_ledger_in_out_dir(self, dataset, trained, tmp_path):
        out = tmp_path / "reports"
        assert run(["eval", "--ckpt", str(trained), "--data", str(dataset), "--combos", "7", "--out", str(out)]) == EXIT_OK
        assert not (out / "run_ledger.json").exists()

    def test_stats_then_train_equals_inline(self, dataset, trained, tmp_path):
        stats = tmp_path / "stats.anyad"
        resumed = tmp_path / "model.anyad"
        assert run(["stats", "--config", SMOKE, "--data", str(dataset), "--ckpt", str(stats), "--seed", "7"]) == EXIT_OK
        assert run(["train", "--resume", str(stats), "--data", str(dataset), "--ckpt", str(resumed), "--quiet"]) == EXIT_OK
        assert resumed.read_bytes() == trained.read_bytes()

    def test_eval_grid(self, dataset, trained, tmp_path):
        out = tmp_path / "reports"
        args = ["eval", "--ckpt", str(trained), "--data", str(dataset), "--combos", "all", "--out", str(out), "--heatmaps"]
        assert run(args) == EXIT_OK
        report = yaml.safe_load((out / "report.yaml").read_text())
        assert sorted(report["combos"]) == [1, 2, 3, 4, 5, 6, 7]
        assert set(report["avg"]) == set(report["combos"][7])
        assert report["step"] == 4
        assert report["training"]["seed"] == 7
        assert report["normalization"]["min"] <= report["normalization"]["max"]
        assert len(list((out / "heatmaps" / "combo3").glob("*.png"))) == 6

    def test_failed_heatmap_write_leaves_no_output(self, dataset, trained, tmp_path, monkeypatch):
        written = []
        real_write = eval_commands.write_heatmap

        def flaky_write(path, values, bounds):
            if len(written) == 3:
                raise OSError("disk full")
            written.append(path)
            return real_write(path, values, bounds)

        monkeypatch.setattr(eval_commands, "write_heatmap", flaky_write)
        out = tmp_path / "reports"
        args = ["eval", "--ckpt", str(trained), "--data", str(dataset), "--combos", "all", "--out", str(out), "--heatmaps"]
        assert run(args) == EXIT_DATA
        assert len(written) == 3
        assert not (out / "heatmaps").exists()
        assert not (out / "report.yaml").exists()
        assert not any(p.name.startswith(".heatmaps") for p in out.iterdir())

    def test_eval_single_combo_and_idempotent(self, dataset, trained, tmp_path):
        reports = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run(["eval", "--ckpt", str(trained), "--data", str(dataset), "--combos", "7", "--out", str(out)]) == EXIT_OK
            reports.append((out / "report.yaml").read_bytes())
        assert reports[0] == reports[1]
        assert list(yaml.safe_load(reports[0])["combos"]) == [7]

    def test_infer(self, dataset, trained, tmp_path):
        blob = next((dataset / "blobs").glob("test_abnormal_*.adsl"))
        assert run(["infer", "--ckpt", str(trained), "--data", str(blob), "--combos", "2", "--out", str(tmp_path)]) == EXIT_OK
        assert (tmp_path / f"{blob.stem}_combo2.png").exists()
        assert (tmp_path / f"{blob.stem}_combo2.adsl").exists()

    def test_ablation_summary(self, dataset, trained, tmp_path):
        paths = []
        for name in ("a", "b"):
            out = tmp_path / name
            run(["eval", "--ckpt", str(trained), "--data", str(dataset), "--out", str(out)])
            paths.append(out / "report.yaml")
        summary = ablation_summary(paths)
        assert summary["runs"] == 2
        assert summary["mean_image_auroc_std"] == pytest.approx(summary["max_image_auroc_std"])


# ============================================================================
# Ingest
# ============================================================================


class TestIngest:
    @pytest.fixture
    def cases(self, tmp_path):
        rng = np.random.default_rng(0)
        root = tmp_path / "cases"
        for case in ("case-a", "case-b"):
            case_dir = root / case
            case_dir.mkdir(parents=True)
            for modality in ("flair", "t1", "t2"):
                raw = nifti_encode((rng.random((8, 8, 10)) * 500).astype(np.int16), datatype=4)
                (case_dir / f"{case}_{modality}.nii.gz").write_bytes(gzip.compress(raw))
            seg = np.zeros((8, 8, 10), np.uint8)
            if case == "case-a":
                seg[3:5, 3:5, 2:5] = 1
            (case_dir / f"{case}_seg.nii").write_bytes(nifti_encode(seg, datatype=2))
        return root

    def test_ingest_case_directories(self, cases, tmp_path, capsys):
        out = tmp_path / "dataset"
        args = ["ingest", "--data", str(cases), "--out", str(out), "--slice-start", "0", "--slice-stop", "9", "--stride", "1"]
        assert run(args) == EXIT_OK
        result = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        # 20 slices, 3 with lesion: 14 train, 3 + 3 test
        assert result["counts"] == {"train": 14, "test_normal": 3, "test_abnormal": 3}
        manifest = yaml.safe_load((out / "manifest.yaml").read_text())
        assert all(s["id"].startswith(("case-a_s", "case-b_s")) for s in manifest["samples"])

    def test_incomplete_case_skipped(self, cases, tmp_path):
        (cases / "case-b" / "case-b_t2.nii.gz").unlink()
        out = tmp_path / "dataset"
        args = ["ingest", "--data", str(cases), "--out", str(out), "--slice-start", "0", "--slice-stop", "9", "--stride", "1"]
        assert run(args) == EXIT_OK
        manifest = yaml.safe_load((out / "manifest.yaml").read_text())
        assert not any(s["id"].startswith("case-b") for s in manifest["samples"])

    def test_mismatched_volume_dims(self, cases, tmp_path, capsys):
        t1 = cases / "case-a" / "case-a_t1.nii.gz"
        t1.write_bytes(gzip.compress(nifti_encode(np.zeros((8, 8, 9), np.int16), datatype=4)))
        args = ["ingest", "--data", str(cases), "--out", str(tmp_path / "d"), "--slice-start", "0", "--slice-stop", "8"]
        assert run(args) == EXIT_DATA
        assert "ShapeError" in capsys.readouterr().err
        assert not (tmp_path / "d" / "manifest.yaml").exists()

    def test_bad_slice_protocol(self, cases, tmp_path):
        args = ["ingest", "--data", str(cases), "--out", str(tmp_path / "d"), "--slice-start", "9", "--slice-stop", "2"]
        assert run(args) == EXIT_USAGE


# ============================================================================
# Verification
# ============================================================================


class TestVerify:
    @pytest.mark.parametrize("suite", ["nifti", "stats", "metrics"])
    def test_suites_pass(self, suite):
        assert run(["verify", "--suite", suite]) == EXIT_OK

    @pytest.mark.parametrize("seed", [0, 3])
    def test_gradcheck_suite(self, seed):
        assert run(["verify", "--suite", "gradcheck", "--seed", str(seed)]) == EXIT_OK

    @pytest.mark.parametrize("seed", range(12))
    def test_verification_model_decoder_attention_is_live(self, seed):
        batch = np.random.default_rng(seed).random((2, 3, 8, 8))
        mask = ModalityMask.from_combo(4)
        model = verify_commands.live_verification_model(seed, batch, mask)
        row_max, closest = verify_commands.decoder_attention_margins(model, batch, mask)
        assert row_max > 1e-3 and closest > 1e-3
        out = model.forward(batch, mask)
        assert np.linalg.norm(out.de0.data, axis=-1).min() > 0
        assert np.linalg.norm(out.de1.data, axis=-1).min() > 0

    def test_threads_pin_pools_in_process(self, monkeypatch):
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            monkeypatch.delenv(var, raising=False)
        seen = []

        def record(seed):
            seen.append([pool["num_threads"] for pool in threadpool_info()])
            return []

        monkeypatch.setitem(verify_commands.SUITES, "nifti", record)
        assert run(["verify", "--suite", "nifti", "--threads", "1"]) == EXIT_OK
        assert all(n == 1 for n in seen[0])

    def test_failure_exits_three(self, monkeypatch, capsys):
        monkeypatch.setitem(verify_commands.SUITES, "nifti", lambda seed: ["nifti fixture mismatch"])
        assert run(["verify", "--suite", "nifti"]) == EXIT_VERIFY
        assert "VerificationError" in capsys.readouterr().err
