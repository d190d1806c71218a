"""CSV output for per-round metrics, bound diagnostics and sweep summaries."""

import csv
import math
from pathlib import Path
from typing import Any, Iterable, List, Sequence, Union

from .federation import RoundMetrics
from . import mylogger

logger = mylogger.get_logger(__name__)

UNDEFINED = "undefined"


def format_cell(value: Any) -> str:
    """17 significant digits for floats so a CSV round-trips the exact double."""
    if value is None:
        return UNDEFINED
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return format(value, ".17g")
    return str(value)


def write_csv(path: Union[str, Path], columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> int:
    """Write a header plus rows; returns the number of data rows."""
    path = Path(path)
    count = 0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])
            count += 1
    logger.debug(f"Wrote {count} rows to {path}")
    return count


class CsvMetricsSink:
    """Streams RoundMetrics rows to metrics.csv as the round loop produces them."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._file = None
        self._writer = None
        self.rows = 0

    def __enter__(self) -> "CsvMetricsSink":
        self._file = open(self.path, "w", newline="")
        self._writer = csv.writer(self._file, lineterminator="\n")
        self._writer.writerow(RoundMetrics.columns())
        return self

    def __call__(self, metrics: RoundMetrics) -> None:
        if self._writer is None:
            raise RuntimeError("CsvMetricsSink used outside its context manager")
        self._writer.writerow([format_cell(v) for v in metrics.as_row()])
        self._file.flush()
        self.rows += 1

    def __exit__(self, exc_type, exc, tb) -> None:
        if self._file is not None:
            self._file.close()
        self._file = None
        self._writer = None


def read_csv(path: Union[str, Path]) -> List[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
