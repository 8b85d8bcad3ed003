import os
import tempfile
import unittest
from unittest import mock

import src.helpers.FilepathUtils as utils


class TestGetOutputDirectory(unittest.TestCase):
    def setUp(self):
        self.project_root = utils.get_project_root()
        self.directory = tempfile.TemporaryDirectory()
        self.addCleanup(self.directory.cleanup)

    def test_override_wins(self):
        override = os.path.join(self.directory.name, "cli")
        with mock.patch.dict(os.environ, {utils.OUTPUT_DIR_VARIABLE: os.path.join(self.directory.name, "env")}):
            self.assertEqual(utils.get_output_directory("dpp", override, "configured"), override)
        self.assertTrue(os.path.isdir(override))

    def test_environment_before_config(self):
        root = os.path.join(self.directory.name, "env")
        with mock.patch.dict(os.environ, {utils.OUTPUT_DIR_VARIABLE: root}):
            directory = utils.get_output_directory("bellman", configured=os.path.join(self.directory.name, "cfg"))
        self.assertEqual(directory, os.path.join(root, "bellman"))

    def test_configured_directory(self):
        configured = os.path.join(self.directory.name, "cfg")
        with mock.patch.dict(os.environ, {utils.OUTPUT_DIR_VARIABLE: ""}):
            self.assertEqual(utils.get_output_directory("solve", configured=configured), configured)

    def test_resolve_config_path(self):
        configPath = os.path.join(self.directory.name, "experiment.yaml")
        self.assertEqual(utils.resolve_config_path(configPath, "measure.csv"),
                         os.path.join(self.directory.name, "measure.csv"))
        absolute = os.path.join(self.project_root, "configs", "zero.yaml")
        self.assertEqual(utils.resolve_config_path(configPath, absolute), absolute)

    def test_artifact_paths(self):
        self.assertEqual(utils.get_summary_filepath("out"), os.path.join("out", "summary.txt"))
        self.assertEqual(utils.get_artifact_filepath("out", "dpp"), os.path.join("out", "dpp.csv"))


if __name__ == '__main__':
    unittest.main()
