import csv

import numpy as np

from ehsod.engine.evaluation import ClassCurve, EvalReport
from ehsod.plotting import plot_cam, plot_loss_curve, save_report

PNG = b"\x89PNG\r\n\x1a\n"


def _report():
    curve = ClassCurve(np.array([1.0, 0.5]), np.array([0.5, 0.5]), 2)
    return EvalReport(["a", "b"], {"a": 0.5, "b": 0.0}, {"a": 0.3, "b": 0.0}, 0.25, 0.15,
                      {"images": 1, "ground_truth": 2, "detections": 2}, {"a": curve})


def test_save_report(tmp_path):
    paths = save_report(_report(), tmp_path)
    with open(paths["csv"]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["category", "ap50", "ap50_95"]
    assert rows[-1] == ["mean", "0.250000", "0.150000"]
    assert len(rows) == 4
    assert open(paths["pr"], "rb").read(8) == PNG


def test_loss_curve(tmp_path):
    hist = [{"iter": i, "total": 1.0 / (i + 1)} for i in range(30)]
    plot_loss_curve(hist, tmp_path / "l.png")
    assert (tmp_path / "l.png").read_bytes()[:8] == PNG


def test_cam_grid(tmp_path):
    image = np.zeros((40, 40, 3), np.uint8)
    cams = [np.random.default_rng(0).random((2, 64 // s, 64 // s)) for s in (4, 8, 16, 32)]
    plot_cam(image, cams, (4, 8, 16, 32), ["a", "b"], tmp_path / "c.png")
    assert (tmp_path / "c.png").read_bytes()[:8] == PNG
