import os
from pathlib import Path

OUTPUT_DIR_VARIABLE = "MFC_LAB_OUTPUT_DIR"


def get_project_root() -> Path:
    return Path(__file__).parent.parent.parent


def get_output_directory(subcommand: str, override: str = None, configured: str = None) -> str:
    """
    :param override: Directory given on the command line. Takes precedence over MFC_LAB_OUTPUT_DIR
    :param configured: Directory named in the experiment config, used when neither of the above is set
    :return: The directory the artifacts of a subcommand are written to, created if missing.
    Defaults to <project root>/output/<subcommand>
    """
    if override is not None:
        directory = override
    elif os.environ.get(OUTPUT_DIR_VARIABLE):
        directory = os.path.join(os.environ[OUTPUT_DIR_VARIABLE], subcommand)
    elif configured is not None:
        directory = configured
    else:
        directory = os.path.join(get_project_root(), "output", subcommand)
    os.makedirs(directory, exist_ok=True)
    return directory


def resolve_config_path(configPath: str, relativePath: str) -> str:
    """
    :return: relativePath read relative to the directory of the config file, unless it is absolute
    """
    if os.path.isabs(relativePath):
        return relativePath
    return os.path.join(os.path.dirname(os.path.abspath(configPath)), relativePath)


def get_summary_filepath(outputDirectory: str) -> str:
    return os.path.join(outputDirectory, "summary.txt")


def get_artifact_filepath(outputDirectory: str, artifactName: str) -> str:
    """
    :param artifactName: CSV artifact name without extension, e.g. "bellman"
    """
    return os.path.join(outputDirectory, artifactName + ".csv")
