"""Run manifests and metric exports.

A manifest is a flat key = value sections file capturing everything needed
to reproduce a run: command, full effective config, seeds, and input/output
content hashes. Manifests intentionally carry no timestamps or host
information, so identical runs write byte-identical files.
"""

from __future__ import annotations

import configparser
import csv
import io
from pathlib import Path


def write_run_manifest(path: str | Path, sections: dict[str, dict]) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep key case
    for name, values in sections.items():
        parser[name] = {key: _render(value) for key, value in values.items()}
    out = io.StringIO()
    parser.write(out)
    Path(path).write_text(out.getvalue())


def read_run_manifest(path: str | Path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    with open(path) as fh:
        parser.read_file(fh)
    return {name: dict(parser[name]) for name in parser.sections()}


def _render(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_render(v) for v in value)
    return str(value)


def write_metrics_csv(path: str | Path, rows: list[dict], fieldnames: list[str] | None = None) -> None:
    """Per-epoch (or per-point) metric history as delimited text for plotting."""
    if not rows:
        Path(path).write_text("")
        return
    if fieldnames is None:
        fieldnames = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _render(row.get(k, "")) for k in fieldnames})


def read_metrics_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summary_table(rows: list[tuple[str, str, str]]) -> str:
    """Human-readable aligned table: (name, accuracy, auc) triples."""
    header = ("run", "accuracy", "auc")
    widths = [
        max(len(header[i]), *(len(r[i]) for r in rows)) if rows else len(header[i])
        for i in range(3)
    ]
    lines = [
        "  ".join(header[i].ljust(widths[i]) for i in range(3)),
        "  ".join("-" * widths[i] for i in range(3)),
    ]
    for row in rows:
        lines.append("  ".join(row[i].ljust(widths[i]) for i in range(3)))
    return "\n".join(lines)
