"""Deterministic run reports: one JSON document plus flat CSV curve files."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericError, ReportIOError

SCHEMA_VERSION = "renormsolve-report/1"


def to_plain(obj, path: str = "$"):
    """Convert numpy scalars/arrays and tuples to JSON types; reject non-finite floats."""
    if isinstance(obj, dict):
        return {str(k): to_plain(v, f"{path}.{k}") for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v, f"{path}[{i}]") for i, v in enumerate(obj)]
    if isinstance(obj, np.ndarray):
        return to_plain(obj.tolist(), path)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        val = float(obj)
        if not math.isfinite(val):
            raise NumericError(f"non-finite value {val} at {path} in report")
        return val
    if obj is None or isinstance(obj, str):
        return obj
    raise TypeError(f"cannot serialise {type(obj).__name__} at {path}")


@dataclass
class RunReport:
    experiment: str
    config_hash: str
    body: dict
    curves: dict = field(default_factory=dict)

    def document(self) -> dict:
        return to_plain(self.body)

    def dumps(self) -> str:
        return json.dumps(self.document(), sort_keys=True, indent=2, allow_nan=False) + "\n"

    @property
    def stem(self) -> str:
        return f"{self.experiment}-{self.config_hash}"


def curve_csv(curve) -> str:
    lines = ["parameter,value"]
    for x, y in curve.rows():
        x, y = float(x), float(y)
        if not (math.isfinite(x) and math.isfinite(y)):
            raise NumericError(f"non-finite entry in curve {curve.name}")
        lines.append(f"{x:.17g},{y:.17g}")
    return "\n".join(lines) + "\n"


def emit_report(report: RunReport, directory, formats=("json", "csv")) -> list[Path]:
    """Write the JSON document, and one CSV per curve when requested and present."""
    out = Path(directory)
    text = report.dumps()
    csvs = {name: curve_csv(c) for name, c in sorted(report.curves.items())} if "csv" in formats else {}
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        target = out / f"{report.stem}.json"
        target.write_text(text)
        written.append(target)
        for name, body in csvs.items():
            target = out / f"{report.stem}-{name}.csv"
            target.write_text(body)
            written.append(target)
    except OSError as err:
        raise ReportIOError(f"cannot write report to {out}: {err}") from None
    return written
