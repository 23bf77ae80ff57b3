"""Report files: CSV tables, JSON documents and SVG line plots.

Every file is written to a temporary sibling and renamed into place. JSON is
written with sorted keys and CSV with `repr` floats, so identical runs produce
identical bytes. Plots are rendered by matplotlib with a fixed SVG hash salt
and without a date stamp, and every plot is accompanied by a CSV holding the
exact points drawn.
"""

import csv
import io
import json
import logging
import math
import os
import re
import tempfile
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import matplotlib as mpl
import numpy as np
from matplotlib.figure import Figure

logger = logging.getLogger(__name__)

SVG_HASH_SALT = "chaoscope"
_UNSAFE_NAME = re.compile(r"[^A-Za-z0-9._-]+")


def atomic_write_text(path: Path, text: str) -> None:
    """Write `text` to `path` through a temporary file in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        Path(tmp).replace(path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def file_label(label: str) -> str:
    """Turn a free-form label (a policy spec or path) into a file-name fragment."""
    return _UNSAFE_NAME.sub("_", label).strip("._") or "unnamed"


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float | np.floating):
        return repr(float(value))
    return str(value)


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """Render a table with `\\n` line endings."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def jsonable(value: Any) -> Any:
    """Convert numpy values and non-finite floats into JSON-safe values.

    NaN and infinities become the strings "nan", "inf" and "-inf".
    """
    if isinstance(value, Mapping):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, list | tuple):
        return [jsonable(v) for v in value]
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, float | np.floating):
        x = float(value)
        if math.isfinite(x):
            return x
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    if isinstance(value, Path):
        return str(value)
    return value


def json_text(data: Any) -> str:
    """Serialize with sorted keys and a trailing newline."""
    return json.dumps(jsonable(data), sort_keys=True, indent=2, allow_nan=False) + "\n"


def line_figure(
    x: Sequence[float],
    columns: Mapping[str, Sequence[float]],
    *,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    logy: bool = False,
) -> Figure:
    """One line per column against a shared x axis; shorter columns cover a prefix of x."""
    fig = Figure(figsize=(6.4, 4.0))
    ax = fig.subplots()
    xs = np.asarray(x, dtype=float)
    for label, ys in columns.items():
        y = np.asarray(ys, dtype=float)
        ax.plot(xs[: len(y)], y, label=label, linewidth=1.0)
    if logy:
        ax.set_yscale("log", nonpositive="mask")
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(visible=True, alpha=0.3)
    if len(columns) > 1:
        ax.legend()
    fig.tight_layout()
    return fig


def svg_text(fig: Figure) -> str:
    """Render a figure as reproducible SVG."""
    buf = io.BytesIO()
    with mpl.rc_context({"svg.hashsalt": SVG_HASH_SALT, "svg.fonttype": "path"}):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue().decode("utf-8")


@dataclass
class ReportBundle:
    """The files one command wrote into its output directory."""

    out_dir: Path
    files: list[Path] = field(default_factory=list)

    def _path(self, name: str) -> Path:
        path = Path(self.out_dir) / name
        self.files.append(path)
        return path

    def csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        """Write `<name>.csv`."""
        path = self._path(f"{name}.csv")
        atomic_write_text(path, csv_text(header, rows))
        return path

    def json(self, name: str, data: Any) -> Path:
        """Write `<name>.json`."""
        path = self._path(f"{name}.json")
        atomic_write_text(path, json_text(data))
        return path

    def text(self, filename: str, content: str) -> Path:
        """Write an arbitrary text file such as policy weights."""
        path = self._path(filename)
        atomic_write_text(path, content)
        return path

    def plot(
        self,
        name: str,
        x_label: str,
        x: Sequence[float],
        columns: Mapping[str, Sequence[float]],
        *,
        title: str = "",
        ylabel: str = "",
        logy: bool = False,
    ) -> tuple[Path, Path]:
        """Write `<name>.svg` and `<name>.csv` holding exactly the plotted points."""
        xs = list(x)
        cols = {k: list(v) for k, v in columns.items()}
        rows = [[xs[i], *(c[i] if i < len(c) else None for c in cols.values())] for i in range(len(xs))]
        csv_path = self.csv(name, [x_label, *cols], rows)
        fig = line_figure(xs, cols, title=title, xlabel=x_label, ylabel=ylabel, logy=logy)
        svg_path = self._path(f"{name}.svg")
        atomic_write_text(svg_path, svg_text(fig))
        logger.debug("Wrote plot %s with %d points", svg_path, len(xs))
        return csv_path, svg_path
