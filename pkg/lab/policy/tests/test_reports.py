import shutil
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
from django.test import SimpleTestCase

from policy.env.camera import CameraPool
from policy.evaluation import ChainResult, TaskRate, chain_frame, results_frame
from policy.exceptions import DatasetIOError
from policy.fileio import atomic_write_csv
from policy.reports import build_report, camera_preview, contact_sheet, report_from_files


def frames(n, size=8):
    return [np.full((size, size, 3), 20 * i, dtype=np.uint8) for i in range(n)]


class ContactSheetTests(SimpleTestCase):

    def test_sheet_size(self):
        sheet = contact_sheet(frames(5), columns=4, pad=2)
        # 4 columns and 2 rows of 8px tiles with 2px gutters
        self.assertEqual(sheet.size, (4 * 10 + 2, 2 * 10 + 2))

    def test_tiles_land_in_place(self):
        sheet = np.asarray(contact_sheet(frames(3), columns=3, pad=2))
        self.assertEqual(tuple(sheet[2, 2]), (0, 0, 0))
        self.assertEqual(tuple(sheet[2, 12]), (20, 20, 20))
        self.assertEqual(tuple(sheet[0, 0]), (255, 255, 255))

    def test_empty_list(self):
        with self.assertRaises(ValueError):
            contact_sheet([])

    def test_camera_preview(self):
        pool = CameraPool(size=40, seed=3, test_every=20)
        preview = camera_preview(pool, split="train", count=3, image_size=16)
        self.assertEqual(preview.size, (3 * 18 + 2, 18 + 2))


class BuildReportTests(SimpleTestCase):

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.addCleanup(shutil.rmtree, self.tmp, ignore_errors=True)

    def assertPdf(self, path):
        self.assertEqual(Path(path).read_bytes()[:4], b"%PDF")

    def test_single_evaluation(self):
        rates = [TaskRate("pick", 7, 10), TaskRate("push", 3, 10)]
        path = build_report(results_frame(rates, "incontext", 2, 16, 8, 20), self.tmp / "eval.pdf")
        self.assertPdf(path)

    def test_ablation_with_metrics_and_preview(self):
        frames_ = []
        for head in ("incontext", "mlp_diffusion"):
            for k in (1, 4):
                rates = [TaskRate("pick", 5 + k, 10), TaskRate("place", 2, 10)]
                frames_.append(results_frame(rates, head, 2, 8, k, 10))
        results = pd.concat(frames_, ignore_index=True)
        metrics = pd.DataFrame({"step": [1, 2, 3], "loss": [1.0, 0.7, 0.5], "lr": [1e-4, 2e-4, 3e-4],
                                "wall_ms": [10.0, 9.0, 9.5]})
        preview = contact_sheet(frames(4))
        self.assertPdf(build_report(results, self.tmp / "grid.pdf", metrics=metrics, preview=preview))

    def test_chain_results(self):
        result = ChainResult(per_position=[0.9, 0.7, 0.5, 0.3, 0.1], avg_len=2.5, n=10)
        self.assertPdf(build_report(chain_frame(result, "incontext", 2, 16, 8, 20), self.tmp / "chain.pdf"))

    def test_from_files(self):
        results = self.tmp / "results.csv"
        metrics = self.tmp / "metrics.csv"
        atomic_write_csv(results, results_frame([TaskRate("pick", 1, 2)], "discrete", 1, 4, 2, 10))
        atomic_write_csv(metrics, pd.DataFrame({"step": [1], "loss": [0.3], "lr": [1e-4], "wall_ms": [5.0]}))
        self.assertPdf(report_from_files(results, self.tmp / "out" / "report.pdf", metrics_path=metrics))

    def test_missing_results(self):
        with self.assertRaises(DatasetIOError):
            report_from_files(self.tmp / "missing.csv", self.tmp / "report.pdf")

    def test_results_without_columns(self):
        bad = self.tmp / "bad.csv"
        bad.write_text("a,b\n1,2\n")
        with self.assertRaises(DatasetIOError):
            report_from_files(bad, self.tmp / "report.pdf")
