"""Event-stream data model, hourly bucketing, imputation, scaling and window extraction.

Event file (JSON lines, UTF-8)::

    {"format": "xaiews-events", "version": 1}
    {"kind": "admission", "admission_id": "A0", "patient_id": "P0", "length_of_stay": 120.5,
     "age": 61.0, "sex": "F", "habitual_creatinine": 74.2}
    {"kind": "event", "admission_id": "A0", "patient_id": "P0", "time": 3.25,
     "parameter": "pulse", "value": 88.0}

The first line is the schema header.  An admission record must precede its
events.  ``habitual_creatinine`` (umol/l, mean of the prior 365 days) may be
null.  The CSV form carries the same fields as columns
``kind,admission_id,patient_id,time,parameter,value,length_of_stay,age,sex,habitual_creatinine``
after a ``# xaiews-events v1`` first line; cells that do not apply to the row
kind are left empty.
"""
import csv
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import _accel

FORMAT_NAME = "xaiews-events"
FORMAT_VERSION = 1
N_TIMESTEPS = 24


def _load_units():
    with resources.files("xaiews.data").joinpath("units.json").open() as fh:
        return json.load(fh)


UNITS = _load_units()
PARAMETERS = [p["id"] for p in UNITS["parameters"]]
PARAMETER_NAMES = [p["name"] for p in UNITS["parameters"]]
LABEL_EVENTS = [p["id"] for p in UNITS["labeling_events"]]
VOCABULARY = PARAMETERS + LABEL_EVENTS
CODE = {name: i for i, name in enumerate(VOCABULARY)}
N_FEATURES = len(PARAMETERS)


class ParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class EventRecord:
    admission_id: str
    patient_id: str
    time: float
    parameter: str
    value: float


@dataclass
class Admission:
    """One stay; events are held column-wise, sorted by (time, parameter code, value).

    The full sort key makes the stored order, and everything derived from it,
    independent of the order events were supplied in.
    """
    admission_id: str
    patient_id: str
    length_of_stay: float
    age: float = 0.0
    sex: str = ""
    habitual_creatinine: float = None
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    codes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.codes = np.asarray(self.codes, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        order = np.lexsort((self.values, self.codes, self.times))
        self.times, self.codes, self.values = self.times[order], self.codes[order], self.values[order]

    @classmethod
    def from_events(cls, admission_id, patient_id, length_of_stay, events, **kw):
        """``events`` is an iterable of (time, parameter name, value)."""
        events = list(events)
        return cls(admission_id, patient_id, length_of_stay,
                   times=[e[0] for e in events], codes=[CODE[e[1]] for e in events],
                   values=[e[2] for e in events], **kw)

    def events(self):
        return [EventRecord(self.admission_id, self.patient_id, float(t), VOCABULARY[c], float(v))
                for t, c, v in zip(self.times, self.codes, self.values)]

    def series(self, parameter):
        sel = self.codes == CODE[parameter]
        return self.times[sel], self.values[sel]

    def with_events(self, extra):
        """Copy with additional (time, parameter, value) events."""
        extra = list(extra)
        return Admission(self.admission_id, self.patient_id, self.length_of_stay, self.age, self.sex,
                         self.habitual_creatinine,
                         np.concatenate([self.times, [e[0] for e in extra]]),
                         np.concatenate([self.codes, np.array([CODE[e[1]] for e in extra], dtype=np.int64)]),
                         np.concatenate([self.values, [e[2] for e in extra]]))


# ---------------------------------------------------------------------------
# Parsing / serialisation
# ---------------------------------------------------------------------------

def _admission_header(adm):
    return {"kind": "admission", "admission_id": adm.admission_id, "patient_id": adm.patient_id,
            "length_of_stay": float(adm.length_of_stay), "age": float(adm.age), "sex": adm.sex,
            "habitual_creatinine": None if adm.habitual_creatinine is None else float(adm.habitual_creatinine)}


def write_events(admissions, fh):
    fh.write(json.dumps({"format": FORMAT_NAME, "version": FORMAT_VERSION}) + "\n")
    for adm in admissions:
        fh.write(json.dumps(_admission_header(adm)) + "\n")
        for t, c, v in zip(adm.times, adm.codes, adm.values):
            fh.write(json.dumps({"kind": "event", "admission_id": adm.admission_id,
                                 "patient_id": adm.patient_id, "time": float(t),
                                 "parameter": VOCABULARY[c], "value": float(v)}) + "\n")


CSV_COLUMNS = ["kind", "admission_id", "patient_id", "time", "parameter", "value",
               "length_of_stay", "age", "sex", "habitual_creatinine"]


def write_events_csv(admissions, fh):
    fh.write(f"# {FORMAT_NAME} v{FORMAT_VERSION}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for adm in admissions:
        h = _admission_header(adm)
        w.writerow(["admission", adm.admission_id, adm.patient_id, "", "", "", repr(h["length_of_stay"]),
                    repr(h["age"]), adm.sex, "" if h["habitual_creatinine"] is None else repr(h["habitual_creatinine"])])
        for t, c, v in zip(adm.times, adm.codes, adm.values):
            w.writerow(["event", adm.admission_id, adm.patient_id, repr(float(t)), VOCABULARY[c],
                        repr(float(v)), "", "", "", ""])


class _Builder:
    def __init__(self):
        self.admissions = {}
        self.order = []
        self.events = {}

    def admission(self, rec, line):
        aid = str(rec["admission_id"])
        if aid in self.admissions:
            raise ParseError(f"duplicate admission {aid}", line)
        los = float(rec["length_of_stay"])
        if not math.isfinite(los) or los < 0:
            raise ParseError("length_of_stay must be a non-negative number", line)
        hc = rec.get("habitual_creatinine")
        self.admissions[aid] = dict(admission_id=aid, patient_id=str(rec["patient_id"]),
                                    length_of_stay=los, age=float(rec.get("age") or 0.0),
                                    sex=str(rec.get("sex") or ""),
                                    habitual_creatinine=None if hc in (None, "") else float(hc))
        self.order.append(aid)
        self.events[aid] = ([], [], [])

    def event(self, rec, line):
        aid = str(rec["admission_id"])
        if aid not in self.admissions:
            raise ParseError(f"event for unknown admission {aid}", line)
        name = rec["parameter"]
        if name not in CODE:
            raise ParseError(f"unknown parameter {name!r}", line)
        t = float(rec["time"])
        v = float(rec["value"])
        if not math.isfinite(t) or t < 0:
            raise ParseError(f"negative or non-finite time {t}", line)
        if t > self.admissions[aid]["length_of_stay"]:
            raise ParseError(f"event at {t} h after end of stay", line)
        if not math.isfinite(v):
            raise ParseError("non-finite value", line)
        ts, cs, vs = self.events[aid]
        ts.append(t)
        cs.append(CODE[name])
        vs.append(v)

    def build(self):
        out = []
        for aid in self.order:
            ts, cs, vs = self.events[aid]
            out.append(Admission(times=ts, codes=cs, values=vs, **self.admissions[aid]))
        return out


def _check_header(ok, line_text, line):
    if not ok:
        raise ParseError(f"missing or unsupported schema header: {line_text.strip()[:80]!r}", line)


def parse_events(stream):
    """Parse the JSON-lines event format into sorted admissions."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    b = _Builder()
    first = True
    for n, text in enumerate(stream, start=1):
        if not text.strip():
            continue
        try:
            rec = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON ({exc.msg})", n) from None
        if first:
            _check_header(isinstance(rec, dict) and rec.get("format") == FORMAT_NAME
                          and rec.get("version") == FORMAT_VERSION, text, n)
            first = False
            continue
        try:
            kind = rec["kind"]
            if kind == "admission":
                b.admission(rec, n)
            elif kind == "event":
                b.event(rec, n)
            else:
                raise ParseError(f"unknown record kind {kind!r}", n)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"malformed record ({exc})", n) from None
    return b.build()


def parse_events_csv(stream):
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    header = stream.readline()
    _check_header(header.strip() == f"# {FORMAT_NAME} v{FORMAT_VERSION}", header, 1)
    reader = csv.DictReader(stream)
    if reader.fieldnames != CSV_COLUMNS:
        raise ParseError("unexpected CSV columns", 2)
    b = _Builder()
    for n, row in enumerate(reader, start=3):
        try:
            if row["kind"] == "admission":
                b.admission(row, n)
            elif row["kind"] == "event":
                b.event(row, n)
            else:
                raise ParseError(f"unknown record kind {row['kind']!r}", n)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"malformed record ({exc})", n) from None
    return b.build()


def read_events(path):
    with open(path, encoding="utf-8") as fh:
        if str(path).endswith(".csv"):
            return parse_events_csv(fh)
        return parse_events(fh)


# ---------------------------------------------------------------------------
# Hourly grids
# ---------------------------------------------------------------------------

@dataclass
class HourlyGrid:
    values: np.ndarray
    mask: np.ndarray
    window_end: float


def bucket_hourly(adm, window_end, n_bins=N_TIMESTEPS):
    """Mean value per one-hour bin; bin b covers [end-n+b, end-n+b+1).

    Unobserved cells are NaN with mask False.  Events at or after
    ``window_end`` are never read.
    """
    start = window_end - n_bins
    sel = (adm.codes < N_FEATURES) & (adm.times >= start) & (adm.times < window_end)
    t = adm.times[sel]
    bins = np.floor(t - start).astype(np.int64)
    # guard rounding at the right edge
    bins = np.clip(bins, 0, n_bins - 1)
    sums, counts = _accel.bucket(bins, adm.codes[sel], adm.values[sel], n_bins, N_FEATURES)
    mask = counts > 0
    values = np.full((n_bins, N_FEATURES), np.nan)
    values[mask] = sums[mask] / counts[mask]
    return HourlyGrid(values, mask, float(window_end))


@dataclass
class FeatureScaler:
    minimum: np.ndarray
    maximum: np.ndarray
    median: np.ndarray

    def to_dict(self):
        return {"min": self.minimum.tolist(), "max": self.maximum.tolist(), "median": self.median.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["min"], dtype=np.float64), np.array(d["max"], dtype=np.float64),
                   np.array(d["median"], dtype=np.float64))

    def scale(self, values):
        span = self.maximum - self.minimum
        span = np.where(span > 0, span, 1.0)
        return np.clip((np.asarray(values) - self.minimum) / span, 0.0, 1.0)

    def unscale(self, scaled):
        span = self.maximum - self.minimum
        span = np.where(span > 0, span, 1.0)
        return np.asarray(scaled) * span + self.minimum


def fit_scaler(admissions):
    """Per-parameter min/max/median over every observed model-parameter value."""
    codes = np.concatenate([a.codes for a in admissions]) if admissions else np.zeros(0, dtype=np.int64)
    values = np.concatenate([a.values for a in admissions]) if admissions else np.zeros(0)
    lo = np.zeros(N_FEATURES)
    hi = np.ones(N_FEATURES)
    med = np.full(N_FEATURES, 0.5)
    for p in range(N_FEATURES):
        v = values[codes == p]
        if len(v):
            lo[p], hi[p], med[p] = v.min(), v.max(), np.median(v)
    return FeatureScaler(lo, hi, med)


def impute(grid, scaler):
    """Carry the last observed bin forward; bins before the first observation get the training median."""
    values = np.asarray(grid.values, dtype=np.float64)
    seen = ~np.isnan(values)
    rows = np.where(seen, np.arange(values.shape[0])[:, None], -1)
    last = np.maximum.accumulate(rows, axis=0)
    filled = np.take_along_axis(values, np.maximum(last, 0), axis=0)
    filled = np.where(last >= 0, filled, scaler.median[None, :])
    return HourlyGrid(filled, grid.mask.copy(), grid.window_end)


def apply_scaler(grid, scaler):
    return HourlyGrid(scaler.scale(grid.values), grid.mask.copy(), grid.window_end)


def prepare_grid(adm, window_end, scaler):
    """bucket -> impute -> scale; returns (model-ready grid, raw imputed grid)."""
    raw = impute(bucket_hourly(adm, window_end), scaler)
    return apply_scaler(raw, scaler), raw


HORIZONS = (0, 3, 6, 12, 24)


def negative_window_end(adm, rng):
    """Uniform in [24, length_of_stay] (or the stay end when the stay is shorter)."""
    if adm.length_of_stay <= N_TIMESTEPS:
        return float(adm.length_of_stay)
    return float(rng.uniform(N_TIMESTEPS, adm.length_of_stay))


def window_end_for(onset_time, horizon, positive, adm=None, rng=None):
    """Prediction time of an extracted window, or None when the sample is excluded."""
    if positive:
        end = onset_time - horizon
        return None if end < 1.0 else float(end)
    return negative_window_end(adm, rng)


def extract_window(adm, label, horizon, rng=None, scaler=None):
    """HourlyGrid for a labelled admission at a horizon; None for excluded positives.

    ``label`` is a ``LabelResult``-like object with ``positive`` and
    ``onset_time``.  Without a scaler the raw (bucketed, NaN-holding) grid is
    returned.
    """
    end = window_end_for(label.onset_time, horizon, label.positive, adm, rng)
    if end is None:
        return None
    if scaler is None:
        return bucket_hourly(adm, end)
    return prepare_grid(adm, end, scaler)[0]
