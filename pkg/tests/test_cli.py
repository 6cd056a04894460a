"""Command-line surface: subcommand artifacts, exit codes, config rejection."""

import csv
import json
import threading
import urllib.request
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from cgsod.cli import main
from cgsod.config import load_config
from cgsod.data import save_mask_png, save_saliency_png
from cgsod.errors import ConfigError
from cgsod.fixtures import generate_mini_coco
from cgsod.server import make_server

FIXTURE = Path(__file__).resolve().parent.parent / "fixtures" / "mini_coco"


def write_identical_maps(tmp_path):
    pred = tmp_path / "pred"
    gt = tmp_path / "gt"
    pred.mkdir()
    gt.mkdir()
    mask = np.zeros((16, 16))
    mask[4:12, 4:12] = 1.0
    for i in range(3):
        save_saliency_png(pred / f"{i}.png", mask)
        save_mask_png(gt / f"{i}.png", mask)
    return pred, gt


class TestConfig:
    def test_defaults_load(self):
        cfg = load_config()
        assert cfg["train"]["image_size"] == 64
        assert [s["reduction"] for s in cfg["model"]["stages"]] == [64, 16, 4, 1]

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("trian:\n  lr: 0.1\n")
        with pytest.raises(ConfigError, match="trian"):
            load_config(path)

    def test_unknown_nested_key_rejected(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("train:\n  lrate: 0.1\n")
        with pytest.raises(ConfigError, match="train.lrate"):
            load_config(path)

    def test_override_wins_over_file(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("train:\n  lr: 0.5\n")
        cfg = load_config(path, ["train.lr=0.25"])
        assert cfg["train"]["lr"] == 0.25

    def test_indivisible_image_size_rejected(self):
        with pytest.raises(ConfigError, match="image_size"):
            load_config(None, ["train.image_size=50"])

    def test_config_error_exit_code(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("nonsense: 1\n")
        rc = main(["train", "-c", str(path)])
        assert rc == 2


class TestEvalCommand:
    def test_identical_maps_score_perfectly(self, tmp_path, capsys):
        pred, gt = write_identical_maps(tmp_path)
        rc = main(["eval", "--pred", str(pred), "--gt", str(gt), "--out", str(tmp_path / "out")])
        assert rc == 0
        report = (tmp_path / "out" / "report.txt").read_text().splitlines()
        values = {
            line.split(":")[0]: line.split(":")[1].strip()
            for line in report
            if ":" in line
        }
        assert float(values["mae"]) == 0.0
        assert abs(float(values["s_measure"]) - 1.0) < 1e-6
        assert abs(float(values["e_measure"]) - 1.0) < 1e-6
        assert float(values["mean_f"]) > 0.99

    def test_missing_counterpart_gives_nonzero_exit(self, tmp_path):
        pred, gt = write_identical_maps(tmp_path)
        save_saliency_png(pred / "orphan.png", np.zeros((4, 4)))
        rc = main(["eval", "--pred", str(pred), "--gt", str(gt), "--out", str(tmp_path / "o")])
        assert rc == 1


class TestTrainPredictCommands:
    def test_tiny_train_then_predict(self, tmp_path):
        dataset = generate_mini_coco(tmp_path / "data", n_images=4, size=64, seed=3)
        out = tmp_path / "run"
        rc = main(
            [
                "train",
                "--out",
                str(out),
                "--set",
                f"data.finetune_dir={dataset}",
                "train.finetune_epochs=1",
                "train.caption_steps=2",
                "train.batch_size=2",
                "model.guidance=[false,false,false,false]",
            ]
        )
        assert rc == 0
        final = out / "checkpoint_final.sdgt"
        assert final.exists()
        assert (out / "vocab.txt").exists()

        pred_out = tmp_path / "preds"
        rc = main(
            [
                "predict",
                "--ckpt",
                str(final),
                "--images",
                str(dataset / "images"),
                "--out",
                str(pred_out),
                "--overlays",
                "--set",
                "model.guidance=[false,false,false,false]",
            ]
        )
        assert rc == 0
        maps = sorted(pred_out.glob("*.png"))
        assert len(maps) == 4
        with Image.open(maps[0]) as img:
            assert img.size == (64, 64)
            assert img.mode == "L"
        overlay_dirs = sorted((pred_out / "overlays").iterdir())
        assert overlay_dirs and (overlay_dirs[0] / "caption.txt").exists()

    def test_predict_guidance_off_matches_plain(self, tmp_path):
        dataset = generate_mini_coco(tmp_path / "data", n_images=2, size=64, seed=4)
        out = tmp_path / "run"
        main(
            [
                "train",
                "--out",
                str(out),
                "--set",
                f"data.finetune_dir={dataset}",
                "train.finetune_epochs=1",
                "train.caption_steps=0",
                "train.batch_size=2",
                "model.guidance=[false,false,false,false]",
            ]
        )
        a, b = tmp_path / "p1", tmp_path / "p2"
        for target, extra in ((a, []), (b, ["--no-guidance"])):
            rc = main(
                [
                    "predict",
                    "--ckpt",
                    str(out / "checkpoint_final.sdgt"),
                    "--images",
                    str(dataset / "images"),
                    "--out",
                    str(target),
                    "--set",
                    "model.guidance=[false,false,false,false]",
                ]
                + extra
            )
            assert rc == 0
        for name in ("0000.png", "0001.png"):
            assert (a / name).read_bytes() == (b / name).read_bytes()


class TestPlotCommand:
    def test_svg_has_one_point_per_threshold(self, tmp_path):
        pred, gt = write_identical_maps(tmp_path)
        main(["eval", "--pred", str(pred), "--gt", str(gt), "--out", str(tmp_path / "out")])
        rc = main(
            ["plot", "--curves", str(tmp_path / "out" / "pr_curve.csv"), "--out", str(tmp_path / "svg")]
        )
        assert rc == 0
        for name in ("pr_curve.svg", "f_curve.svg"):
            svg = (tmp_path / "svg" / name).read_text()
            points = svg.split('points="')[1].split('"')[0].split()
            assert len(points) == 256


class TestRelabelExportCommand:
    def test_export_from_selections(self, tmp_path):
        sel_path = tmp_path / "selections.jsonl"
        sel_path.write_text(
            json.dumps(
                {
                    "image": "0000.png",
                    "segments": [100],
                    "annotator": "a",
                    "ts": "2024-01-01T00:00:00+00:00",
                }
            )
            + "\n"
        )
        rc = main(
            [
                "relabel-export",
                "--dataset",
                str(FIXTURE),
                "--selections",
                str(sel_path),
                "--out",
                str(tmp_path / "out"),
            ]
        )
        assert rc == 0
        rows = list(csv.DictReader(open(tmp_path / "out" / "manifest.csv")))
        assert len(rows) == 1 and rows[0]["segments"] == "100"

    def test_unresolved_exit_code(self, tmp_path):
        sel_path = tmp_path / "selections.jsonl"
        sel_path.write_text(
            json.dumps(
                {
                    "image": "nope.png",
                    "segments": [1],
                    "annotator": "a",
                    "ts": "2024-01-01T00:00:00+00:00",
                }
            )
            + "\n"
        )
        rc = main(
            [
                "relabel-export",
                "--dataset",
                str(FIXTURE),
                "--selections",
                str(sel_path),
                "--out",
                str(tmp_path / "out"),
            ]
        )
        assert rc == 1


@pytest.fixture()
def annotation_server(tmp_path):
    dataset = generate_mini_coco(tmp_path / "ds", n_images=3, size=32, seed=9)
    server = make_server(dataset, 0, export_dir=tmp_path / "export")
    port = server.server_address[1]
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{port}", dataset, tmp_path / "export"
    server.shutdown()
    server.server_close()


def http_get(url):
    with urllib.request.urlopen(url) as resp:
        return resp.status, resp.read()


def http_post(url, payload):
    req = urllib.request.Request(
        url, data=json.dumps(payload).encode(), headers={"Content-Type": "application/json"}
    )
    try:
        with urllib.request.urlopen(req) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as err:
        return err.code, err.read()


class TestAnnotationServer:
    def test_task_list(self, annotation_server):
        base, _, _ = annotation_server
        status, body = http_get(f"{base}/api/images")
        assert status == 200
        tasks = json.loads(body)
        assert len(tasks) == 3
        assert all(not t["done"] for t in tasks)
        assert tasks[0] == {"id": "0000", "width": 32, "height": 32, "done": False}

    def test_task_list_covers_shipped_fixture(self, tmp_path):
        import shutil

        copy = tmp_path / "mini_coco"
        shutil.copytree(FIXTURE, copy)
        server = make_server(copy, 0)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        try:
            port = server.server_address[1]
            _, body = http_get(f"http://127.0.0.1:{port}/api/images")
            assert len(json.loads(body)) == 30
        finally:
            server.shutdown()
            server.server_close()

    def test_panoptic_metadata(self, annotation_server):
        base, _, _ = annotation_server
        status, body = http_get(f"{base}/api/images/0000/panoptic")
        meta = json.loads(body)
        assert status == 200
        assert meta["raster_url"] == "/api/images/0000/raster"
        ids = {s["id"] for s in meta["segments"]}
        assert 1000 in ids
        for seg in meta["segments"]:
            assert seg["pixel_count"] > 0
            assert len(seg["color"]) == 3

    def test_selection_round_trip_marks_done(self, annotation_server):
        base, _, _ = annotation_server
        seg_ids = [s["id"] for s in json.loads(http_get(f"{base}/api/images/0001/panoptic")[1])["segments"]]
        chosen = sorted(seg_ids)[:2]
        status, _ = http_post(
            f"{base}/api/images/0001/selection", {"segments": chosen, "annotator": "t"}
        )
        assert status == 204
        status, body = http_get(f"{base}/api/images/0001/selection")
        assert json.loads(body)["segments"] == chosen
        tasks = {t["id"]: t for t in json.loads(http_get(f"{base}/api/images")[1])}
        assert tasks["0001"]["done"] and not tasks["0000"]["done"]

    def test_unknown_segment_rejected(self, annotation_server):
        base, _, _ = annotation_server
        status, body = http_post(
            f"{base}/api/images/0000/selection", {"segments": [987654], "annotator": "t"}
        )
        assert status == 400
        assert "segments" in json.loads(body)["errors"]

    def test_malformed_body_rejected(self, annotation_server):
        base, _, _ = annotation_server
        status, body = http_post(f"{base}/api/images/0000/selection", {"segments": "zzz"})
        assert status == 400
        errors = json.loads(body)["errors"]
        assert "segments" in errors and "annotator" in errors

    def test_unknown_image_404(self, annotation_server):
        base, _, _ = annotation_server
        status, _ = http_post(
            f"{base}/api/images/zzzz/selection", {"segments": [], "annotator": "t"}
        )
        assert status == 404

    def test_export_endpoint(self, annotation_server):
        base, dataset, export_dir = annotation_server
        http_post(f"{base}/api/images/0000/selection", {"segments": [100], "annotator": "t"})
        status, body = http_get(f"{base}/api/export")
        assert status == 200
        payload = json.loads(body)
        assert payload["exported"] == 1 and payload["unresolved"] == []
        assert (export_dir / "masks" / "0000.png").exists()

    def test_concurrent_posts_keep_lines_whole(self, annotation_server):
        base, dataset, _ = annotation_server
        errors = []

        def post(image_id):
            try:
                status, _ = http_post(
                    f"{base}/api/images/{image_id}/selection",
                    {"segments": [100], "annotator": f"w{image_id}"},
                )
                assert status == 204
            except Exception as exc:  # pragma: no cover
                errors.append(exc)

        threads = [
            threading.Thread(target=post, args=(f"{i:04d}",)) for i in range(3) for _ in range(4)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        lines = (dataset / "selections.jsonl").read_text().splitlines()
        assert len(lines) == 12
        for line in lines:
            record = json.loads(line)  # every line parses as one record
            assert record["segments"] == [100]
