"""Daily series ingestion and model / report serialization.

Model documents are JSON::

    {"schema": "shmm-model", "version": 1,
     "dims": {"K": .., "T": .., "d": ..},
     "beta": [[[..]]],          # [i][j][c], reference column omitted
     "pi": [..],
     "emissions": {"family": .., "states": .., "period": .., <family params>}}

Floats are written with Python's shortest round-trip repr, so
``load_model(save_model(m))`` reproduces every parameter bit for bit.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from shmm.core import ModelDims, PeriodicLogitTransition, SeasonalHMM
from shmm.emissions import family_from_dict

log = logging.getLogger(__name__)

SCHEMA = "shmm-model"
SCHEMA_VERSION = 1
DAYS = 365


class IngestError(ValueError):
    pass


class ImputationError(IngestError):
    pass


class SchemaError(ValueError):
    pass


# ---------------------------------------------------------------------------
# calendar
# ---------------------------------------------------------------------------


def day_of_year(date: dt.date) -> int:
    """Position of ``date`` in a 365-day year (Feb 29 has no slot and raises)."""
    if date.month == 2 and date.day == 29:
        raise ValueError("Feb 29 has no day-of-year in a 365-day calendar")
    doy = date.timetuple().tm_yday
    if date.month > 2 and _leap(date.year):
        doy -= 1
    return doy


def _leap(year: int) -> bool:
    return year % 4 == 0 and (year % 100 != 0 or year % 400 == 0)


def _parse_date(text: str, fmt: str) -> dt.date:
    text = text.strip()
    if fmt == "iso":
        return dt.date.fromisoformat(text)
    if fmt == "compact":
        return dt.datetime.strptime(text, "%Y%m%d").date()
    return dt.datetime.strptime(text, fmt).date()


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


@dataclass
class DailySeries:
    """Gap-free daily values on a 365-day calendar.

    ``doy[i]`` is the day of year (1..365) of ``values[i]``; ``provenance``
    lists every dropped or imputed row as a dict.
    """

    values: np.ndarray
    doy: np.ndarray
    dates: Optional[list] = None
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.doy = np.asarray(self.doy, dtype=np.int64)
        if self.values.shape != self.doy.shape:
            raise ValueError("values and doy must have equal length")

    def __len__(self) -> int:
        return self.values.size

    @property
    def start(self) -> int:
        """Phase of the first value."""
        return int(self.doy[0]) if self.values.size else 1

    def imputed(self) -> list:
        return [p for p in self.provenance if p["action"] == "imputed"]

    def dropped(self) -> list:
        return [p for p in self.provenance if p["action"] == "dropped"]


@dataclass
class IngestConfig:
    """How to read a delimited daily file.

    ``date_column`` / ``value_column`` are header names or 0-based positions;
    ``date_format`` is ``"iso"``, ``"compact"`` (YYYYMMDD), a strptime
    pattern, or ``None`` for files without dates (then ``start_doy`` gives
    the first day and rows are taken as consecutive days without Feb 29).
    Values below ``missing_below`` are missing.  ``scale`` multiplies raw
    values (0.1 turns tenths of mm into mm).
    """

    date_column: Union[str, int, None] = "DATE"
    value_column: Union[str, int] = "RR"
    date_format: Optional[str] = "compact"
    delimiter: str = ","
    missing_below: float = 0.0
    missing_value: Optional[float] = None
    scale: float = 1.0
    quality_column: Union[str, int, None] = None
    bad_quality: tuple = ("9",)
    start_doy: int = 1
    has_header: bool = True


def _column(header, col, what):
    if col is None or isinstance(col, int):
        return col
    names = [h.strip() for h in header]
    if col not in names:
        raise IngestError(f"{what} column {col!r} not found in header {names}")
    return names.index(col)


def _read_rows(path, cfg: IngestConfig):
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    start = 0
    header = None
    if cfg.has_header:
        wanted = [c for c in (cfg.date_column, cfg.value_column) if isinstance(c, str)]
        for i, line in enumerate(lines):
            toks = [t.strip() for t in line.split(cfg.delimiter)]
            if wanted and all(w in toks for w in wanted):
                header, start = toks, i + 1
                break
            if not wanted and line.strip():
                header, start = toks, i + 1
                break
        if header is None:
            raise IngestError(f"no header line with columns {wanted} in {path}")
    rows = []
    for i, tokens in enumerate(csv.reader(lines[start:], delimiter=cfg.delimiter), start=start + 1):
        if not tokens or all(not t.strip() for t in tokens):
            continue
        rows.append((i, [t.strip() for t in tokens]))
    return header or [], rows


def ingest(path, cfg: Optional[IngestConfig] = None, seed: Optional[int] = None) -> DailySeries:
    """Read a daily series, drop Feb 29, fill missing values.

    Missing values (below ``cfg.missing_below``, equal to
    ``cfg.missing_value``, empty, flagged by the quality column, or absent
    dates inside the covered range) are replaced by a random draw, using
    ``seed``, among the observed values sharing their day of year.  A
    series that needs imputation without a seed raises ImputationError.
    """
    cfg = cfg or IngestConfig()
    header, rows = _read_rows(path, cfg)
    dcol = _column(header, cfg.date_column, "date") if cfg.date_format is not None else None
    vcol = _column(header, cfg.value_column, "value")
    qcol = _column(header, cfg.quality_column, "quality")

    provenance = []
    dates, raw, bad = [], [], []
    for line, tok in rows:
        try:
            d = _parse_date(tok[dcol], cfg.date_format) if dcol is not None else None
            text = tok[vcol]
            v = float(text) if text else np.nan
        except (ValueError, IndexError) as exc:
            bad.append(f"line {line}: {exc}")
            continue
        if qcol is not None and qcol < len(tok) and tok[qcol] in cfg.bad_quality:
            v = np.nan
        dates.append((d, line))
        raw.append(v)
    if bad:
        raise IngestError("unparseable rows:\n" + "\n".join(bad[:20]) + ("\n..." if len(bad) > 20 else ""))
    if not raw:
        raise IngestError(f"no data rows in {path}")
    raw = np.array(raw, dtype=float)
    missing = ~np.isfinite(raw) | (raw < cfg.missing_below)
    if cfg.missing_value is not None:
        missing |= raw == cfg.missing_value
    vals = np.where(missing, np.nan, raw * cfg.scale)

    if dcol is None:
        doy = (np.arange(vals.size) + cfg.start_doy - 1) % DAYS + 1
        out_dates = None
    else:
        by_date = {}
        for (d, line), v in zip(dates, vals):
            if d in by_date:
                raise IngestError(f"line {line}: duplicate date {d.isoformat()}")
            if d.month == 2 and d.day == 29:
                provenance.append({"action": "dropped", "date": d.isoformat(), "line": line, "reason": "Feb 29"})
                continue
            by_date[d] = v
        first, last = min(by_date), max(by_date)
        out_dates, series = [], []
        day = first
        while day <= last:
            if not (day.month == 2 and day.day == 29):
                if day not in by_date:
                    provenance.append({"action": "filled", "date": day.isoformat(), "reason": "absent row"})
                out_dates.append(day)
                series.append(by_date.get(day, np.nan))
            day += dt.timedelta(days=1)
        vals = np.array(series, dtype=float)
        doy = np.array([day_of_year(d) for d in out_dates], dtype=np.int64)

    vals = _impute(vals, doy, seed, provenance, out_dates)
    return DailySeries(vals, doy, [d.isoformat() for d in out_dates] if out_dates else None, provenance)


def _impute(vals, doy, seed, provenance, dates):
    holes = np.flatnonzero(np.isnan(vals))
    if holes.size == 0:
        return vals
    observed = vals.copy()
    empty = sorted({int(doy[i]) for i in holes if not np.any(np.isfinite(observed[doy == doy[i]]))})
    if empty:
        raise ImputationError(f"no observed values for day(s) of year {empty}")
    if seed is None:
        raise ImputationError(f"{holes.size} missing value(s) need imputation; pass an explicit seed")
    rng = np.random.default_rng(seed)
    out = vals.copy()
    for i in holes:
        pool = observed[(doy == doy[i]) & np.isfinite(observed)]
        out[i] = pool[rng.integers(pool.size)]
        entry = {"action": "imputed", "index": int(i), "doy": int(doy[i]), "value": float(out[i])}
        if dates:
            entry["date"] = dates[i].isoformat()
        provenance.append(entry)
    return out


def write_series(path, values, dates=None, states=None):
    """CSV with columns ``index[,date][,state],value``; states are written 1-based."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ["index"] + (["date"] if dates is not None else []) + (["state"] if states is not None else []) + ["value"]
        w.writerow(cols)
        for i, v in enumerate(values):
            row = [i + 1]
            if dates is not None:
                row.append(dates[i])
            if states is not None:
                row.append(int(states[i]) + 1)
            row.append(repr(float(v)))
            w.writerow(row)


def read_values(path, column: str = "value") -> np.ndarray:
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        return np.array([float(row[column]) for row in r])


# ---------------------------------------------------------------------------
# model documents
# ---------------------------------------------------------------------------


def model_to_dict(model: SeasonalHMM) -> dict:
    return {
        "schema": SCHEMA,
        "version": SCHEMA_VERSION,
        "dims": {"K": model.dims.K, "T": model.dims.T, "d": model.dims.d},
        "beta": model.transition.beta.tolist(),
        "pi": model.pi.tolist(),
        "emissions": model.emissions.to_dict(),
    }


def model_from_dict(doc: dict) -> SeasonalHMM:
    if doc.get("schema") != SCHEMA:
        raise SchemaError(f"not a model document (schema={doc.get('schema')!r})")
    if doc.get("version") != SCHEMA_VERSION:
        raise SchemaError(f"unsupported model document version {doc.get('version')!r}")
    try:
        dims = ModelDims(**{k: int(doc["dims"][k]) for k in ("K", "T", "d")})
        beta = np.array(doc["beta"], dtype=float).reshape(dims.K, dims.K - 1, dims.n_coef)
        fam = family_from_dict(doc["emissions"])
        return SeasonalHMM(dims, PeriodicLogitTransition(dims, beta), fam, np.array(doc["pi"], dtype=float))
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed model document: {exc!r}") from exc


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=True) + "\n"


def save_model(model: SeasonalHMM, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(model_to_dict(model)))


def load_model(path) -> SeasonalHMM:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: {exc}") from exc
    return model_from_dict(doc)


def save_json(obj, path) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(dumps(obj))


def write_table(path, header, rows) -> None:
    """CSV writer; floats use full round-trip precision and NaN is written empty."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    def cell(v):
        if isinstance(v, (float, np.floating)):
            return "" if not np.isfinite(v) else repr(float(v))
        if isinstance(v, np.integer):
            return int(v)
        return v

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([cell(v) for v in row])
