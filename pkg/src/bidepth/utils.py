import logging
import os
from pathlib import Path

THREADS_ENV = "BI3D_THREADS"

logger = logging.getLogger("bidepth.utils")


def sanitize_workers(number: int | str | None, unknown_to_auto: bool = True) -> int:
    """
    This function ensures that worker counts coming from the environment
    or from the command line are usable as a thread pool size.

    Args:
        number (int | str | None): requested worker count. 0 or None means
            "use every available CPU".
        unknown_to_auto (bool): whether anything unparseable or negative
            should fall back to automatic sizing. (default: True)

    Returns:
        int: a worker count >= 1
    """
    auto = os.cpu_count() or 1

    # Covering nones and empty strings
    if number is None or number == "":
        return auto

    try:
        value = int(number)
    except (TypeError, ValueError) as e:
        if not unknown_to_auto:
            raise ValueError(f"{number!r} is not a worker count") from e
        logger.warning(f"Ignoring invalid worker count {number!r}, using {auto}")
        return auto

    if value < 0:
        if not unknown_to_auto:
            raise ValueError(f"{number!r} is not a worker count")
        logger.warning(f"Ignoring negative worker count {value}, using {auto}")
        return auto

    return value or auto


def resolve_workers(requested: int | None = None) -> int:
    """
    Work out how many planes can be classified in parallel.

    An explicit request wins; otherwise BI3D_THREADS is consulted.

    Args:
        requested (int | None): explicit worker count (default: None)

    Returns:
        int: worker count >= 1
    """
    if requested is not None:
        return sanitize_workers(requested)
    return sanitize_workers(os.environ.get(THREADS_ENV))


def read_key_values(path: str | Path) -> list[tuple[str, str]]:
    """
    Parse a plain-text `key = value` file.

    Blank lines and `#` comments are ignored. Keys may repeat (scene files
    list one `layer` entry per line), so pairs are returned in file order.

    Args:
        path (str | Path): file to read

    Returns:
        list[tuple[str, str]]: (key, value) pairs, keys lower-cased

    Throws:
        ValueError if a non-empty line has no `=`.
    """
    pairs = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            pairs.append((key.strip().lower(), value.strip()))
    return pairs
