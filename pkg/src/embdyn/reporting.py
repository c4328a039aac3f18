"""CSV artifacts and dependency-free SVG line charts.

Every CSV has a header row whose last column is ``schema=<name>``; data rows
leave that column empty.  Floats are written with ``repr`` so a value read
back parses to the identical double, and nothing depends on the locale.
"""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import numpy as np

TRAIN_SCHEMA = "embdyn.train.v1"
SIMULATE_SCHEMA = "embdyn.simulate.v1"
EVAL_SCHEMA = "embdyn.eval.v1"


def format_value(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _header(columns, schema: str) -> list[str]:
    return list(columns) + [f"schema={schema}"]


def csv_text(columns, rows, schema: str, header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(_header(columns, schema))
    for row in rows:
        w.writerow([format_value(row.get(c, "")) for c in columns] + [""])
    return buf.getvalue()


def write_csv(path, columns, rows, schema: str):
    Path(path).write_text(csv_text(columns, rows, schema), encoding="utf-8", newline="")


def append_csv(path, columns, rows, schema: str):
    """Append rows, writing the header first if the file is new.

    Raises ``ValueError`` if an existing file has a different header.
    """
    p = Path(path)
    if p.exists() and p.stat().st_size > 0:
        existing = p.read_text(encoding="utf-8").splitlines()[0]
        if next(csv.reader([existing])) != _header(columns, schema):
            raise ValueError(f"{p} has a different header; refusing to append")
        with p.open("a", encoding="utf-8", newline="") as fh:
            fh.write(csv_text(columns, rows, schema, header=False))
    else:
        write_csv(p, columns, rows, schema)


def read_csv_text(text: str) -> tuple[list[str], list[dict], str]:
    """Parse a CSV written by this module into ``(columns, rows, schema)``."""
    reader = csv.reader(io.StringIO(text))
    head = next(reader)
    if not head or not head[-1].startswith("schema="):
        raise ValueError("missing schema column in header")
    columns, schema = head[:-1], head[-1].split("=", 1)[1]
    rows = [dict(zip(columns, r[:-1])) for r in reader if r]
    return columns, rows, schema


def read_csv(path) -> tuple[list[str], list[dict], str]:
    return read_csv_text(Path(path).read_text(encoding="utf-8"))


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _tick(x: float) -> str:
    return f"{x:.4g}"


def svg_line_chart(xs, ys, title: str, width: int = 480, height: int = 240) -> str:
    """A single-series line chart.  Non-finite points are skipped."""
    pts = [(float(x), float(y)) for x, y in zip(xs, ys) if math.isfinite(float(x)) and math.isfinite(float(y))]
    left, right, top, bottom = 60, 10, 24, 30
    pw, ph = width - left - right, height - top - bottom
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="16" font-family="monospace" font-size="12" text-anchor="middle">{title}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    if pts:
        x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
        y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
        if x1 == x0:
            x1 = x0 + 1.0
        if y1 == y0:
            y0, y1 = y0 - 0.5, y1 + 0.5
        coords = " ".join(f"{_fmt(left + pw * (x - x0) / (x1 - x0))},{_fmt(top + ph * (1 - (y - y0) / (y1 - y0)))}" for x, y in pts)
        parts.append(f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{coords}"/>')
        labels = ((left - 4, top + 4, "end", _tick(y1)), (left - 4, top + ph, "end", _tick(y0)),
                  (left, height - 12, "start", _tick(x0)), (left + pw, height - 12, "end", _tick(x1)))
        for x, y, anchor, text in labels:
            parts.append(f'<text x="{x}" y="{y}" font-family="monospace" font-size="10" text-anchor="{anchor}">{text}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def svgs_from_csv(text: str, x: str, ys) -> dict[str, str]:
    """One chart per column in ``ys``; a pure function of the CSV text."""
    columns, rows, _ = read_csv_text(text)
    for c in [x, *ys]:
        if c not in columns:
            raise ValueError(f"column {c!r} not in CSV")
    out = {}
    for y in ys:
        pairs = [(r[x], r[y]) for r in rows if r[x] != "" and r[y] != ""]
        out[y] = svg_line_chart([float(a) for a, _ in pairs], [float(b) for _, b in pairs], y)
    return out
