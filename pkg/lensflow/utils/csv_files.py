import csv
from pathlib import Path
from typing import Any, Callable, Iterable, List


def write_csv(
    path,
    rows: Iterable[Any],
    headers: List[str],
    row_fn: Callable[[Any], List[Any]],
) -> Path:
    """
    Write CSV rows one at a time without building the full file in memory.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)

        # header
        w.writerow(headers)

        # rows
        for r in rows:
            w.writerow(row_fn(r))

    return path


def read_csv(path) -> List[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
