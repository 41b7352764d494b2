"""
Status output for pipeline stages.
Lines go through tqdm.write so they interleave cleanly with progress bars.
"""
from tqdm import tqdm

from _settings_helper import get_setting

_QUIET: bool | None = None


def set_quiet(quiet: bool) -> None:
    global _QUIET
    _QUIET = quiet


def is_quiet() -> bool:
    if _QUIET is None:
        return get_setting("POSEUNC_QUIET", "0") in {"1", "true", "yes"}
    return _QUIET


def info(message: str) -> None:
    """Prints an indented status line unless quiet."""
    if not is_quiet():
        tqdm.write(f"  {message}")


def warn(message: str) -> None:
    """Warnings are printed even in quiet mode."""
    tqdm.write(f"  [WARNING] {message}")


def progress(iterable, desc: str, total: int | None = None):
    """tqdm bar named after the stage; silent when quiet."""
    return tqdm(iterable, desc=desc, total=total, disable=is_quiet(), leave=False)
