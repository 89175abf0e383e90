import os

__version__ = "0.3.0"


def default_output_dir() -> str:
    """Return the directory runs write to when no ``--out`` is given.

    Honors ``LAFF_OUTPUT_DIR``; otherwise ``./runs`` under the current directory.
    """
    return os.environ.get("LAFF_OUTPUT_DIR") or os.path.join(os.getcwd(), "runs")
