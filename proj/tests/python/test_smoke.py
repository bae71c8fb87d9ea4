"""Smoke tests for the Python bindings.

Run with the built extension on PYTHONPATH:
    PYTHONPATH=build/bindings:python python3 tests/python/test_smoke.py
"""

import json
import math
import os
import sys
import tempfile

import zipnet


def approx(a, b, tol=1e-9):
    assert abs(a - b) < tol, f"{a} != {b}"


def test_geometry():
    approx(zipnet.iou((0, 0, 10, 10), (0, 0, 10, 10)), 1.0)
    approx(zipnet.iou((0, 0, 10, 10), (20, 20, 30, 30)), 0.0)
    approx(zipnet.iou((0, 0, 10, 10), (5, 5, 15, 15)), 25.0 / 175.0)

    kept = zipnet.nms([(0, 0, 10, 10), (0, 0, 10, 10), (40, 40, 50, 50)], [0.9, 0.8, 0.5], 0.5)
    assert kept == [0, 2], kept

    off = zipnet.encode_offset((0, 0, 10, 20), (0, 0, 20, 20))
    approx(off[2], math.log(2.0))
    back = zipnet.decode_offset(off, (0, 0, 10, 20))
    for a, b in zip(back, (0, 0, 20, 20)):
        approx(a, b, 1e-9)


def test_templates_and_stats():
    templates = zipnet.make_templates([16, 32, 64, 128, 256, 512], [0.15, 0.5, 1, 2, 6.7])
    assert len(templates) == 30
    for scale, ratio, width in templates:
        approx(width, scale * math.sqrt(ratio), 1e-9)

    quantiles = zipnet.fit_ratio_stats([(0, 0, 10, 10), (0, 0, 20, 20), (0, 0, 12, 12)])
    assert quantiles == [1.0] * 5


def test_grad_check():
    results = zipnet.grad_check()
    names = [op for op, _, _ in results]
    assert len(names) == len(set(names))
    assert "conv2d" in names and "roi_pool" in names
    for op, err, ok in results:
        assert ok, f"{op} failed with {err}"


def test_pipeline_end_to_end():
    cfg = json.loads(zipnet.default_config_json())
    assert cfg["train"]["q"] == 2

    with tempfile.TemporaryDirectory() as work:
        data_dir = os.path.join(work, "data")
        overrides = [
            "precision=f32",
            "data.n=6",
            "data.side=96",
            f"data.dir={data_dir}",
            "net.channels=[6,8,12]",
            "net.head_channels=8",
            "net.tower_channels=8",
            "train.iterations=3",
            "train.roi_batch=8",
            "train.max_train_side=192",
            "test.scales=[96]",
            "test.first_branch_top_n=40",
            "test.top_k=20",
            "eval.budgets=[10,100]",
        ]
        assert zipnet.gen_data("", overrides) == 0
        manifest = os.path.join(data_dir, "manifest.json")
        assert os.path.exists(manifest)

        run_dir = os.path.join(work, "run")
        assert zipnet.train(manifest, run_dir, "", overrides) == 0
        checkpoint = os.path.join(run_dir, "checkpoint.zipt")
        assert os.path.exists(checkpoint)
        assert os.path.exists(os.path.join(run_dir, "loss.csv"))

        proposals = os.path.join(work, "props.json")
        assert zipnet.propose(checkpoint, manifest, proposals, "", overrides) == 0
        with open(proposals) as fh:
            props = json.load(fh)
        assert len(props) == 6
        for entry in props:
            for box in entry["boxes"]:
                assert len(box) == 5
                x1, y1, x2, y2, score = box
                assert 0 <= x1 < x2 <= 96 and 0 <= y1 < y2 <= 96

        report_path = os.path.join(work, "report.json")
        assert zipnet.evaluate(manifest, proposals, report_path, "", overrides) == 0
        with open(report_path) as fh:
            report = json.load(fh)
        assert "ar_at" in report and "100" in report["ar_at"]

        stats_path = os.path.join(work, "stats.json")
        assert zipnet.anchor_stats(manifest, stats_path, "", overrides) == 0
        with open(stats_path) as fh:
            stats = json.load(fh)
        assert len(stats["ratio_quantiles"]) == 5

        predictor = zipnet.PredictorF32(checkpoint, "", overrides)
        with open(manifest) as fh:
            first_image = json.load(fh)["images"][0]["file"]
        boxes = predictor.propose_file(os.path.join(data_dir, first_image))
        assert len(boxes) <= 20
        for x1, y1, x2, y2, score in boxes:
            assert 0 <= x1 < x2 <= 96


def main():
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    for test in tests:
        test()
        print(f"{test.__name__}: ok")
    print(f"{len(tests)} python smoke tests passed")


if __name__ == "__main__":
    main()
