"""End-to-end command line behavior, run in-process via cli.main()."""

import json

import numpy as np

from gebd import cli
from gebd.data import load_annotations, load_features
from gebd.model import load_checkpoint
from gebd.postprocess import load_detections, load_scores


SMALL = [
    "--frames", "30", "--fps", "5", "--stage-dims", "6,6,6,6",
    "--min-boundaries", "2", "--max-boundaries", "3",
]


def run(argv):
    return cli.main(argv)


def synth_small(tmp_path, n=4, seed=0, extra=()):
    out = tmp_path / "data"
    code = run(["synth", "--out", str(out), "--num-videos", str(n),
                "--seed", str(seed), *SMALL, *extra])
    assert code == 0
    return out


def train_small(tmp_path, data_dir, epochs=1, extra=()):
    out = tmp_path / "run"
    code = run([
        "train", "--features", str(data_dir), "--annotations", str(data_dir / "annotations.json"),
        "--out", str(out), "--epochs", str(epochs), "--batch-size", "2",
        "--warmup-epochs", "0" if epochs <= 2 else "1",
        "--d-out", "8", "--d-head", "4", "--seed", "0", *extra,
    ])
    assert code == 0
    return out


class TestSynth:
    def test_writes_features_annotations_manifest(self, tmp_path):
        out = synth_small(tmp_path, n=10)
        gebf = sorted(out.glob("*.gebf"))
        assert len(gebf) == 10
        anns = load_annotations(out / "annotations.json")
        assert len(anns) == 10
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["videos"]) == 10
        assert all("seed" in v for v in manifest["videos"])
        assert (out / "run_config.txt").exists()

    def test_rerun_same_seed_identical_bytes(self, tmp_path):
        a = synth_small(tmp_path / "a", n=3, seed=5)
        b = synth_small(tmp_path / "b", n=3, seed=5)
        for fa in sorted(a.glob("*.gebf")):
            fb = b / fa.name
            assert fa.read_bytes() == fb.read_bytes()

    def test_refuses_nonempty_dir_without_force(self, tmp_path, capsys):
        out = synth_small(tmp_path, n=2)
        code = run(["synth", "--out", str(out), "--num-videos", "2", *SMALL])
        assert code == 1
        assert cli.ERROR_PREFIX in capsys.readouterr().err
        assert run(["synth", "--out", str(out), "--num-videos", "2", "--force", *SMALL]) == 0

    def test_invalid_stage_dims(self, tmp_path, capsys):
        code = run(["synth", "--out", str(tmp_path / "x"), "--num-videos", "1",
                    "--frames", "30", "--stage-dims", "6,0,6,6"])
        assert code == 1
        err = capsys.readouterr().err
        assert err.startswith(cli.ERROR_PREFIX)
        assert "stage_dims" in err

    def test_annotation_fps_matches(self, tmp_path):
        out = synth_small(tmp_path, n=2)
        for ann in load_annotations(out / "annotations.json").values():
            assert ann.fps == 5.0
            assert ann.duration == 6.0


class TestTrain:
    def test_epochs_zero_writes_initialized_checkpoint(self, tmp_path):
        data = synth_small(tmp_path, n=2)
        out = train_small(tmp_path, data, epochs=0)
        model = load_checkpoint(out / "model.gebw")
        assert model.config.d_out == 8
        curve = (out / "loss.csv").read_text().strip().splitlines()
        assert curve == ["step,lr,loss"]

    def test_checkpoint_round_trips_bit_exact(self, tmp_path):
        data = synth_small(tmp_path, n=2)
        out = train_small(tmp_path, data, epochs=1)
        from gebd.model import save_checkpoint

        path = out / "model.gebw"
        model = load_checkpoint(path)
        save_checkpoint(tmp_path / "again.gebw", model)
        assert path.read_bytes() == (tmp_path / "again.gebw").read_bytes()

    def test_loss_csv_has_steps(self, tmp_path):
        data = synth_small(tmp_path, n=4)
        out = train_small(tmp_path, data, epochs=2)
        lines = (out / "loss.csv").read_text().strip().splitlines()
        assert lines[0] == "step,lr,loss"
        assert len(lines) == 1 + 2 * 2  # 4 videos / batch 2 = 2 steps per epoch

    def test_missing_annotations_error(self, tmp_path, capsys):
        data = synth_small(tmp_path, n=2)
        (data / "annotations.json").unlink()
        code = run(["train", "--features", str(data),
                    "--annotations", str(data / "annotations.json"),
                    "--out", str(tmp_path / "r")])
        assert code == 1
        assert cli.ERROR_PREFIX in capsys.readouterr().err


class TestInfer:
    def test_scores_and_detections_written(self, tmp_path):
        data = synth_small(tmp_path, n=3)
        run_dir = train_small(tmp_path, data, epochs=1)
        out = tmp_path / "infer"
        code = run(["infer", "--checkpoint", str(run_dir / "model.gebw"),
                    "--features", str(data), "--out", str(out), "--fps", "5"])
        assert code == 0
        score_files = sorted((out / "scores").glob("*.json"))
        det_files = sorted((out / "detections").glob("*.json"))
        assert len(score_files) == 3 and len(det_files) == 3
        s = load_scores(score_files[0])
        assert len(s.scores) == 30
        assert s.smoothed  # smoothing defaults on
        d = load_detections(det_files[0])
        assert d.timestamps == sorted(d.timestamps)

    def test_no_smooth_changes_detections_on_noisy_input(self, tmp_path):
        data = synth_small(tmp_path, n=3, seed=2)
        run_dir = train_small(tmp_path, data, epochs=0)  # random-init model: noisy scores

        def detections(flag):
            out = tmp_path / f"infer_{flag}"
            code = run(["infer", "--checkpoint", str(run_dir / "model.gebw"),
                        "--features", str(data), "--out", str(out), "--fps", "5",
                        "--smooth" if flag else "--no-smooth"])
            assert code == 0
            return [load_detections(p).timestamps for p in sorted((out / "detections").glob("*.json"))]

        assert detections(True) != detections(False)

    def test_clip_mode_uses_expected_starts(self, tmp_path, monkeypatch):
        data = tmp_path / "long"
        code = run(["synth", "--out", str(data), "--num-videos", "1", "--frames", "100",
                    "--fps", "5", "--stage-dims", "6,6,6,6",
                    "--min-boundaries", "3", "--max-boundaries", "3"])
        assert code == 0
        run_dir = train_small(tmp_path, data, epochs=0)

        seen = []
        from gebd import postprocess as post_mod

        original = post_mod.merge_clip_scores

        def spy(scored):
            seen.append([clip.start_frame for clip, _ in scored])
            return original(scored)

        monkeypatch.setattr(cli.post_mod, "merge_clip_scores", spy)
        out = tmp_path / "clipinfer"
        code = run(["infer", "--checkpoint", str(run_dir / "model.gebw"),
                    "--features", str(data), "--out", str(out), "--fps", "5",
                    "--clip-mode"])
        assert code == 0
        assert seen == [[0, 25, 50]]
        s = load_scores(next((out / "scores").glob("*.json")))
        assert len(s.scores) == 100

    def test_checkpoint_mismatch_names_field(self, tmp_path, capsys):
        data = synth_small(tmp_path, n=1)
        run_dir = train_small(tmp_path, data, epochs=0)
        code = run(["infer", "--checkpoint", str(run_dir / "model.gebw"),
                    "--features", str(data), "--out", str(tmp_path / "bad"),
                    "--fps", "2"])
        assert code == 1
        assert "neighbor_radius" in capsys.readouterr().err


class TestEval:
    def write_perfect_detections(self, tmp_path, data):
        det_dir = tmp_path / "dets"
        det_dir.mkdir()
        anns = load_annotations(data / "annotations.json")
        for vid, ann in anns.items():
            (det_dir / f"{vid}.json").write_text(
                json.dumps({"video_id": vid, "timestamps": list(ann.boundaries)})
            )
        return det_dir

    def test_perfect_detections_all_ones(self, tmp_path):
        data = synth_small(tmp_path, n=3)
        det_dir = self.write_perfect_detections(tmp_path, data)
        report = tmp_path / "report.csv"
        code = run(["eval", "--detections", str(det_dir),
                    "--annotations", str(data / "annotations.json"),
                    "--out", str(report)])
        assert code == 0
        lines = report.read_text().strip().splitlines()
        assert len(lines) == 12
        for line in lines[1:]:
            _, p, r, f1 = line.split(",")
            assert float(p) == float(r) == float(f1) == 1.0

    def test_empty_detections_zero_report(self, tmp_path):
        data = synth_small(tmp_path, n=2)
        det_dir = tmp_path / "dets"
        det_dir.mkdir()
        for vid in load_annotations(data / "annotations.json"):
            (det_dir / f"{vid}.json").write_text(
                json.dumps({"video_id": vid, "timestamps": []})
            )
        report = tmp_path / "report.csv"
        code = run(["eval", "--detections", str(det_dir),
                    "--annotations", str(data / "annotations.json"),
                    "--out", str(report)])
        assert code == 0
        for line in report.read_text().strip().splitlines()[1:]:
            assert line.split(",")[3] == "0.000000"

    def test_id_mismatch_lists_missing(self, tmp_path, capsys):
        data = synth_small(tmp_path, n=2)
        det_dir = self.write_perfect_detections(tmp_path, data)
        next(iter(det_dir.glob("*.json"))).unlink()
        code = run(["eval", "--detections", str(det_dir),
                    "--annotations", str(data / "annotations.json"),
                    "--out", str(tmp_path / "r.csv")])
        assert code == 1
        assert "without detections" in capsys.readouterr().err


class TestConfigFile:
    def test_file_then_flags_precedence(self, tmp_path):
        cfg_file = tmp_path / "cfg.txt"
        cfg_file.write_text("frames = 40\nfps = 5\nnum_videos = 2\nsnr = 3.5\n")
        out = tmp_path / "out"
        code = run(["synth", "--out", str(out), "--config", str(cfg_file),
                    "--frames", "20", "--stage-dims", "4,4",
                    "--min-boundaries", "1", "--max-boundaries", "2"])
        assert code == 0
        echo = (out / "run_config.txt").read_text()
        assert "frames = 20" in echo     # flag wins
        assert "snr = 3.5" in echo       # file applies
        assert "num_videos = 2" in echo
        v = load_features(next(out.glob("*.gebf")))
        assert v.num_frames == 20

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg_file = tmp_path / "cfg.txt"
        cfg_file.write_text("nonsense_key = 3\n")
        code = run(["synth", "--out", str(tmp_path / "o"), "--config", str(cfg_file)])
        assert code == 1
        assert "unknown config key" in capsys.readouterr().err

    def test_echo_round_trips(self, tmp_path):
        out = synth_small(tmp_path, n=1)
        echo = out / "run_config.txt"
        parsed = cli.load_config_file(echo)
        assert parsed["frames"] == 30
        assert parsed["stage_dims"] == (6, 6, 6, 6)
        assert parsed["smooth_inference"] is True


class TestWorkerCount:
    def test_env_override(self, monkeypatch):
        from gebd.util import worker_count

        monkeypatch.setenv("GEBD_THREADS", "3")
        assert worker_count() == 3
        monkeypatch.setenv("GEBD_THREADS", "0")
        import pytest as _pytest
        with _pytest.raises(ValueError):
            worker_count()
        monkeypatch.delenv("GEBD_THREADS")
        assert worker_count() >= 1


class TestTrainSmokeTiming:
    def test_tiny_train_completes_quickly(self, tmp_path):
        import time

        data = synth_small(tmp_path, n=4)
        start = time.perf_counter()
        train_small(tmp_path, data, epochs=2)
        assert time.perf_counter() - start < 60.0
