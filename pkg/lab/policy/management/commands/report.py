"""manage.py report: PDF summary of an eval or ablation CSV."""
from pathlib import Path

from policy.env.camera import default_pool
from policy.reports import camera_preview, report_from_files

from ._base import LabCommand


class Command(LabCommand):
    help = "Build a PDF report (tables + charts) from a results CSV and an optional training metrics CSV."

    def add_arguments(self, parser):
        parser.add_argument("--results", required=True, help="Results CSV from eval or ablate.")
        parser.add_argument("--out", required=True, help="PDF path.")
        parser.add_argument("--metrics", help="Training metrics CSV.")
        parser.add_argument("--preview-cameras", type=int, default=8,
                            help="Held-out cameras shown in the preview (0 to skip).")

    def run(self, **options):
        preview = None
        if options["preview_cameras"] > 0:
            preview = camera_preview(default_pool(), "test", options["preview_cameras"])
        path = report_from_files(Path(options["results"]), Path(options["out"]), options["metrics"], preview)
        self.success(f"Report written to {path}")
