"""Per-iteration run logs and their CSV/JSON serialisation."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

COLUMNS = ("iteration", "system_probes", "avg_return", "grad_norm", "eta", "beta", "wall_ms")
_INT_COLUMNS = {"iteration", "system_probes", "wall_ms"}


class ExportError(OSError):
    pass


@dataclass(frozen=True)
class RunRow:
    iteration: int
    system_probes: int
    avg_return: float
    grad_norm: float
    eta: float
    beta: float
    wall_ms: int = 0


@dataclass
class RunRecord:
    rows: list[RunRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def append(self, row: RunRow) -> None:
        if self.rows and row.system_probes <= self.rows[-1].system_probes:
            raise ValueError("system_probes must be strictly increasing")
        self.rows.append(row)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.rows]

    def trailing_returns(self, window: int = 10) -> list[float]:
        """Mean avg_return over the last ``window`` iterations, per iteration."""
        out, vals = [], self.column("avg_return")
        for i in range(len(vals)):
            chunk = vals[max(0, i - window + 1) : i + 1]
            out.append(sum(chunk) / len(chunk))
        return out

    def probes_to_threshold(self, threshold: float, window: int = 10) -> float:
        """System probes at the first iteration whose trailing mean reaches ``threshold`` (inf if never)."""
        for row, tr in zip(self.rows, self.trailing_returns(window)):
            if tr >= threshold:
                return row.system_probes
        return math.inf

    def final_trailing_return(self, window: int = 10) -> float:
        tr = self.trailing_returns(window)
        return tr[-1] if tr else math.nan


def _fmt(name, value) -> str:
    if name in _INT_COLUMNS:
        return str(int(value))
    return format(float(value), ".17g")


def to_csv(record: RunRecord) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in record.rows:
        w.writerow([_fmt(c, getattr(row, c)) for c in COLUMNS])
    return buf.getvalue()


def from_csv(text: str) -> RunRecord:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != COLUMNS:
        raise ValueError(f"CSV header must be {','.join(COLUMNS)}")
    rec = RunRecord()
    for line in reader:
        vals = {c: (int(v) if c in _INT_COLUMNS else float(v)) for c, v in zip(COLUMNS, line)}
        rec.rows.append(RunRow(**vals))
    return rec


def to_json(record: RunRecord) -> str:
    return json.dumps({"metadata": record.metadata, "rows": [asdict(r) for r in record.rows]}, indent=1)


def from_json(text: str) -> RunRecord:
    data = json.loads(text)
    names = {f.name for f in fields(RunRow)}
    rows = [RunRow(**{k: v for k, v in r.items() if k in names}) for r in data["rows"]]
    return RunRecord(rows=rows, metadata=data.get("metadata", {}))


def export(record: RunRecord, path, fmt: str = "csv") -> Path:
    """Write one record as CSV or JSON; returns the path written."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown format {fmt!r}")
    path = Path(path)
    text = to_csv(record) if fmt == "csv" else to_json(record)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc}") from exc
    return path


def load(path) -> RunRecord:
    path = Path(path)
    text = path.read_text()
    return from_json(text) if path.suffix == ".json" else from_csv(text)
