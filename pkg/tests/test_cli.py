from __future__ import annotations

import json

from vidannot.cli import EXIT_CONFIG, EXIT_OK, main


def write_tiny_config(path, **extra):
    payload = {
        "world": {
            "frame_width": 160,
            "frame_height": 120,
            "num_objects": 2,
            "num_frames": 10,
            "velocities": [[0.3, 0.1], [-0.2, 0.2]],
            "rng_seed": 3,
            "occlusion_enabled": False,
        },
        "ash": {"alpha": 1.0},
        "chunker": {"chi": 8, "omega": 2},
    }
    payload.update(extra)
    path.write_text(json.dumps(payload))
    return str(path)


class TestCliVerbs:
    def test_simulate(self, tmp_path, capsys):
        cfg = write_tiny_config(tmp_path / "c.json")
        rc = main(["simulate", "--config", cfg, "--out", str(tmp_path / "out"), "--seq", "s"])
        assert rc == EXIT_OK
        assert (tmp_path / "out" / "s_gt.txt").exists()

    def test_detect(self, tmp_path):
        cfg = write_tiny_config(tmp_path / "c.json")
        rc = main(["detect", "--config", cfg, "--out", str(tmp_path / "out"), "--seq", "s"])
        assert rc == EXIT_OK
        lines = (tmp_path / "out" / "s_det.txt").read_text().splitlines()
        assert lines and all(line.split(",")[1] == "-1" for line in lines)

    def test_annotate_and_evaluate(self, tmp_path, capsys):
        cfg = write_tiny_config(tmp_path / "c.json")
        out = tmp_path / "out"
        rc = main(["annotate", "--config", cfg, "--out", str(out), "--seq", "s"])
        assert rc == EXIT_OK
        assert (out / "s_annotations.jsonl").exists()
        rc = main(["simulate", "--config", cfg, "--out", str(out), "--seq", "s"])
        assert rc == EXIT_OK
        rc = main(
            [
                "evaluate",
                "--pred", str(out / "s_track.txt"),
                "--gt", str(out / "s_gt.txt"),
                "--seq", "s",
                "--out", str(out),
            ]
        )
        assert rc == EXIT_OK
        captured = capsys.readouterr()
        assert "MOTA" in captured.out
        assert (out / "s_metrics.csv").exists()

    def test_resume_requires_checkpoint_dir(self, tmp_path):
        cfg = write_tiny_config(tmp_path / "c.json")
        rc = main(["resume", "--config", cfg, "--out", str(tmp_path / "out")])
        assert rc == EXIT_CONFIG

    def test_annotate_then_resume(self, tmp_path):
        cfg = write_tiny_config(tmp_path / "c.json")
        out = tmp_path / "out"
        ck = tmp_path / "ck"
        rc = main(["annotate", "--config", cfg, "--out", str(out), "--seq", "s",
                   "--checkpoint-dir", str(ck)])
        assert rc == EXIT_OK
        first = (out / "s_annotations.jsonl").read_bytes()
        rc = main(["resume", "--config", cfg, "--out", str(out), "--seq", "s",
                   "--checkpoint-dir", str(ck)])
        assert rc == EXIT_OK
        assert (out / "s_annotations.jsonl").read_bytes() == first

    def test_deploy(self, tmp_path, capsys):
        cfg = write_tiny_config(tmp_path / "c.json")
        rc = main(["deploy", "--config", cfg, "--out", str(tmp_path / "out"),
                   "--sequences", "2", "--seq", "d"])
        assert rc == EXIT_OK
        summary = json.loads(capsys.readouterr().out)
        assert summary["failures"] == []
        assert set(summary["qa"]) == {"d00", "d01"}

    def test_bad_config_exit_code(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"chunker": {"omega": 60, "chi": 50}}))
        rc = main(["annotate", "--config", str(p), "--out", str(tmp_path / "out")])
        assert rc == EXIT_CONFIG

    def test_mode_flag_accepted(self, tmp_path):
        cfg = write_tiny_config(tmp_path / "c.json")
        for mode in ("full", "chunk", "auto"):
            rc = main(["annotate", "--config", cfg, "--out", str(tmp_path / mode),
                       "--seq", "s", "--mode", mode])
            assert rc == EXIT_OK
