import logging
from typing import Dict

import numpy as np
import pandas as pd

from src.helpers.FilepathUtils import get_artifact_filepath, get_summary_filepath

FLOAT_FORMAT = "%.12g"


def format_value(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "pass" if value else "fail"
    if isinstance(value, (float, np.floating)):
        return FLOAT_FORMAT % value
    return str(value).replace("\n", " ")


class Summary:
    """
    Ordered key=value lines written to summary.txt. Checks are stored as check.<name>=pass|fail
    """

    def __init__(self, subcommand: str, seed: int):
        self.entries: Dict[str, str] = {"subcommand": subcommand, "seed": str(seed), "status": "ok"}

    def add(self, key: str, value):
        if "=" in key or "\n" in key:
            raise ValueError(key + " is not a valid summary key")
        self.entries[key] = format_value(value)

    def add_all(self, values: dict, prefix: str = ""):
        for key, value in values.items():
            self.add(prefix + key, value)

    def check(self, name: str, passed: bool):
        self.add("check." + name, bool(passed))

    @property
    def allPassed(self) -> bool:
        return all(value == "pass" for key, value in self.entries.items() if key.startswith("check."))

    def to_text(self) -> str:
        return "".join(key + "=" + value + "\n" for key, value in self.entries.items())

    def write(self, outputDirectory: str) -> str:
        filepath = get_summary_filepath(outputDirectory)
        with open(filepath, "w", encoding="utf-8") as file:
            file.write(self.to_text())
        return filepath


def read_summary(filepath: str) -> Dict[str, str]:
    entries = {}
    with open(filepath, encoding="utf-8") as file:
        for line in file:
            line = line.rstrip("\n")
            if line:
                key, _, value = line.partition("=")
                entries[key] = value
    return entries


def write_frame(frame: pd.DataFrame, outputDirectory: str, artifactName: str) -> str:
    """
    Writes frame as <artifactName>.csv with a fixed float format, so reruns produce identical bytes
    """
    filepath = get_artifact_filepath(outputDirectory, artifactName)
    frame.to_csv(filepath, index=False, float_format=FLOAT_FORMAT)
    logging.info("Wrote " + filepath)
    return filepath
