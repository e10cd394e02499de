import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from endosight.cli import main
from endosight.imaging import write_png


def mask_dir(path, masks):
    path.mkdir(parents=True)
    for name, m in masks.items():
        write_png(path / f"{name}.png", m)
    return path


def disk(side, r):
    yy, xx = np.mgrid[0:side, 0:side]
    return ((xx - side / 2) ** 2 + (yy - side / 2) ** 2 <= r * r).astype(np.uint8)


class TestSplit:
    def test_ids_file(self, tmp_path):
        ids = tmp_path / "ids.txt"
        ids.write_text("".join(f"img{i:04d}\n" for i in range(20)))
        assert main(["split", "--ids", str(ids), "--out", str(tmp_path / "s.json")]) == 0
        d = json.loads((tmp_path / "s.json").read_text())
        assert (len(d["train"]), len(d["val"]), len(d["test"]), d["seed"]) == (14, 3, 3, 42)

    def test_data_dir_and_env_default(self, tmp_path, monkeypatch):
        for sub in ("images", "masks"):
            (tmp_path / "d" / sub).mkdir(parents=True)
            for i in range(10):
                Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "d" / sub / f"{i}.png")
        monkeypatch.setenv("ENDOSIGHT_OUT", str(tmp_path / "out"))
        assert main(["split", "--data", str(tmp_path / "d")]) == 0
        d = json.loads((tmp_path / "out" / "split.json").read_text())
        assert (len(d["train"]), len(d["val"]), len(d["test"])) == (7, 1, 2)

    def test_missing_data_dir(self, tmp_path, capsys):
        assert main(["split", "--data", str(tmp_path / "none")]) == 1
        assert "missing directory" in capsys.readouterr().err


class TestLabelsAndStats:
    def test_labels(self, tmp_path, capsys):
        bbox = tmp_path / "bb.json"
        bbox.write_text(json.dumps({
            "a": {"height": 100, "width": 100, "bbox": [{"label": "polyp", "xmin": 10, "ymin": 20,
                                                         "xmax": 50, "ymax": 60}]},
            "b": {"height": 50, "width": 50, "bbox": [{"xmin": 5, "ymin": 5, "xmax": 5, "ymax": 9}]},
        }))
        assert main(["labels", "--bbox", str(bbox), "--out", str(tmp_path / "labels")]) == 0
        assert (tmp_path / "labels/a.txt").read_text() == "0 0.300000 0.400000 0.400000 0.400000\n"
        assert (tmp_path / "labels/b.txt").read_text() == ""
        assert "degenerate box" in capsys.readouterr().err

    def test_labels_malformed(self, tmp_path, capsys):
        bbox = tmp_path / "bb.json"
        bbox.write_text('{"a": ')
        assert main(["labels", "--bbox", str(bbox)]) == 1
        assert "byte offset" in capsys.readouterr().err

    def test_stats(self, tmp_path):
        for sub in ("images", "masks"):
            (tmp_path / "d" / sub).mkdir(parents=True)
        for i, (w, h) in enumerate([(100, 100), (200, 200)]):
            for sub in ("images", "masks"):
                Image.fromarray(np.zeros((h, w, 3), np.uint8)).save(tmp_path / "d" / sub / f"{i}.png")
        out = tmp_path / "stats.json"
        assert main(["stats", "--data", str(tmp_path / "d"), "--sample", "2", "--out", str(out)]) == 0
        s = json.loads(out.read_text())
        assert (s["mean_w"], s["mean_h"], s["unique_dims"]) == (150, 150, 2)


class TestEval:
    def test_seg_identity(self, tmp_path):
        masks = {"a": disk(32, 8), "b": disk(32, 12), "c": np.zeros((32, 32), np.uint8)}
        p = mask_dir(tmp_path / "p", masks)
        g = mask_dir(tmp_path / "g", masks)
        assert main(["eval-seg", "--pred", str(p), "--gt", str(g), "--out", str(tmp_path / "r")]) == 0
        rep = json.loads((tmp_path / "r/report.json").read_text())
        assert rep["means"]["dice"] == 1.0 and rep["n"] == 3
        assert rep["categories"]["dice"]["Excellent"] == 3
        with open(tmp_path / "r/samples.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["id"] for r in rows] == ["a", "b", "c"]
        assert set(rows[0]) == {"id", "dice", "iou", "pixel_accuracy", "sensitivity", "specificity", "category"}

    def test_seg_missing_pred_counts_as_empty(self, tmp_path, capsys):
        p = mask_dir(tmp_path / "p", {"extra": disk(16, 4)})
        g = mask_dir(tmp_path / "g", {"a": disk(16, 4)})
        assert main(["eval-seg", "--pred", str(p), "--gt", str(g), "--out", str(tmp_path / "r")]) == 0
        rep = json.loads((tmp_path / "r/report.json").read_text())
        assert rep["means"]["dice"] == 0.0
        assert "extra" in capsys.readouterr().err

    def test_seg_size_mismatch(self, tmp_path):
        p = mask_dir(tmp_path / "p", {"a": disk(16, 4)})
        g = mask_dir(tmp_path / "g", {"a": disk(20, 4)})
        assert main(["eval-seg", "--pred", str(p), "--gt", str(g), "--out", str(tmp_path / "r")]) == 1

    def test_det(self, tmp_path):
        (tmp_path / "p").mkdir()
        (tmp_path / "g").mkdir()
        (tmp_path / "g/a.txt").write_text("0 0.5 0.5 0.2 0.2\n")
        (tmp_path / "p/a.txt").write_text("0 0.1 0.1 0.05 0.05 0.9\n0 0.5 0.5 0.2 0.2 0.8\n")
        (tmp_path / "g/b.txt").write_text("")
        assert main(["eval-det", "--pred", str(tmp_path / "p"), "--gt", str(tmp_path / "g"),
                     "--out", str(tmp_path / "r")]) == 0
        rep = json.loads((tmp_path / "r/report.json").read_text())
        assert rep["map50"] == 0.5
        assert rep["means"]["precision"] == pytest.approx((0.5 + 1.0) / 2)


class TestPipelineCommands:
    def test_demo_outputs(self, tmp_path):
        out = tmp_path / "demo"
        assert main(["demo", "--frames", "5", "--out", str(out)]) == 0
        assert len(list((out / "frames").iterdir())) == 5
        assert json.loads((out / "index.json").read_text())["frame_count"] == 5
        assert len((out / "tracks.jsonl").read_text().splitlines()) == 5
        assert json.loads((out / "scene.json").read_text())["polyps"]

    def test_run_scene_static_single_id(self, tmp_path):
        scene = tmp_path / "scene.json"
        scene.write_text(json.dumps([{"center": [0.5, 0.5], "radii": [0.1, 0.1]}]))
        out = tmp_path / "run"
        assert main(["run", "--scene", str(scene), "--n-frames", "50", "--out", str(out)]) == 0
        rows = [json.loads(ln) for ln in (out / "tracks.jsonl").read_text().splitlines()]
        assert len(rows) == 50 and {r["id"] for r in rows} == {1}

    def test_run_frames_dir(self, tmp_path):
        scene = tmp_path / "scene.json"
        scene.write_text(json.dumps([{"center": [0.5, 0.5], "radii": [0.1, 0.1]}]))
        (tmp_path / "frames").mkdir()
        for i in range(3):
            write_png(tmp_path / "frames" / f"{i:03d}.png", np.zeros((416, 416, 3), np.uint8))
        assert main(["run", "--frames", str(tmp_path / "frames"), "--scene", str(scene),
                     "--out", str(tmp_path / "o")]) == 0
        assert json.loads((tmp_path / "o/index.json").read_text())["frame_count"] == 3

    def test_run_empty_source(self, tmp_path):
        scene = tmp_path / "scene.json"
        scene.write_text("[]")
        (tmp_path / "frames").mkdir()
        assert main(["run", "--frames", str(tmp_path / "frames"), "--scene", str(scene),
                     "--out", str(tmp_path / "o")]) == 0
        assert json.loads((tmp_path / "o/index.json").read_text())["frame_count"] == 0
        assert (tmp_path / "o/tracks.jsonl").read_text() == ""

    def test_run_needs_source(self, tmp_path, capsys):
        assert main(["run", "--out", str(tmp_path)]) == 1
        assert "--frames" in capsys.readouterr().err

    def test_run_unknown_backend(self, tmp_path, capsys):
        assert main(["demo", "--frames", "2", "--detector", "nope", "--out", str(tmp_path)]) == 1
        assert "unknown detector" in capsys.readouterr().err

    def test_config_file_and_flag_override(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"calibration": {"mm_per_px": 0.2}, "mode": "full-frame"}))
        out = tmp_path / "o"
        assert main(["demo", "--frames", "3", "--config", str(cfg), "--mode", "roi", "--out", str(out)]) == 0
        rows = [json.loads(ln) for ln in (out / "tracks.jsonl").read_text().splitlines()]
        assert rows[-1]["diameter_mm"] is not None


class TestSupervise:
    def test_simulated_demo_job(self, tmp_path):
        tele = tmp_path / "t.json"
        tele.write_text(json.dumps({"base_c": 70, "spikes": {"30": 86}}))
        log = tmp_path / "sup.jsonl"
        assert main(["supervise", "--epochs", "6", "--telemetry", str(tele), "--simulate", "--log", str(log)]) == 0
        kinds = [json.loads(ln)["kind"] for ln in log.read_text().splitlines()]
        assert kinds.count("critical_pause") == 1 and kinds.count("chunk_break") == 1
        assert kinds[-1] == "job_done"

    def test_command_failure_exit(self, tmp_path, capsys):
        tele = tmp_path / "t.json"
        tele.write_text("{}")
        rc = main(["supervise", "--epochs", "1", "--telemetry", str(tele), "--simulate",
                   "--log", str(tmp_path / "l.jsonl"), "--", sys.executable, "-c", "raise SystemExit(1)"])
        assert rc == 1
        assert "job failed" in capsys.readouterr().err


def test_unknown_subcommand():
    with pytest.raises(SystemExit) as ei:
        main(["frobnicate"])
    assert ei.value.code != 0


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "endosight", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "supervise" in res.stdout
