import os
import tempfile
from unittest import TestCase

import numpy as np
import pandas as pd

from src.helpers.Reports import Summary, format_value, read_summary, write_frame


class Test(TestCase):
    def test_format_value(self):
        self.assertEqual(format_value(True), "pass")
        self.assertEqual(format_value(np.bool_(False)), "fail")
        self.assertEqual(format_value(0.1), "0.1")
        self.assertEqual(format_value(np.float64(1.0) / 3.0), "0.333333333333")
        self.assertEqual(format_value(7), "7")
        self.assertEqual(format_value("two\nlines"), "two lines")

    def test_summary_keeps_insertion_order(self):
        summary = Summary("dpp", 4)
        summary.add("V", 0.5)
        summary.add_all({"mean": 1.0, "stderr": 0.25}, prefix="V.")
        self.assertEqual(summary.to_text(), "subcommand=dpp\nseed=4\nstatus=ok\nV=0.5\nV.mean=1\nV.stderr=0.25\n")
        with self.assertRaises(ValueError):
            summary.add("bad=key", 1)

    def test_checks_decide_all_passed(self):
        summary = Summary("bellman", 0)
        self.assertTrue(summary.allPassed)
        summary.check("terminal", True)
        self.assertTrue(summary.allPassed)
        summary.check("rate", False)
        self.assertFalse(summary.allPassed)
        self.assertEqual(summary.entries["check.rate"], "fail")

    def test_summary_and_frames_are_written(self):
        with tempfile.TemporaryDirectory() as directory:
            summary = Summary("solve", 1)
            summary.add("residual", 1e-9)
            filepath = summary.write(directory)
            self.assertEqual(os.path.basename(filepath), "summary.txt")
            self.assertEqual(read_summary(filepath), {"subcommand": "solve", "seed": "1", "status": "ok",
                                                      "residual": "1e-09"})
            frame = pd.DataFrame({"step": [0, 1], "value": [1.0 / 3.0, 2.0]})
            csvPath = write_frame(frame, directory, "bundle")
            self.assertEqual(os.path.basename(csvPath), "bundle.csv")
            with open(csvPath, encoding="utf-8") as file:
                self.assertEqual(file.read().splitlines(), ["step,value", "0,0.333333333333", "1,2"])
