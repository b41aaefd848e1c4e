"""Gold-standard labelers: Sepsis-3, KDIGO acute kidney injury (creatinine rules), ALI.

Thresholds for SOFA live in ``data/sofa_thresholds.json``.  All times are hours
since admission start; creatinine is in umol/l.
"""
import bisect
import csv
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .ehr import CODE

ILLNESSES = ("sepsis", "aki", "ali")
SOFA_COMPONENTS = ("respiration", "coagulation", "liver", "cardiovascular", "renal")

SI_CULTURE_FIRST_HOURS = 72.0
SI_ANTIBIOTIC_FIRST_HOURS = 24.0
SOFA_WINDOW_BEFORE = 48.0
SOFA_WINDOW_AFTER = 24.0
SOFA_RISE = 2
KDIGO_DELTA_UMOL = 26.5
KDIGO_DELTA_HOURS = 48.0
KDIGO_RATIO = 1.5
KDIGO_FALLBACK_HOURS = 168.0


def load_sofa_table(path=None):
    if path is None:
        with resources.files("xaiews.data").joinpath("sofa_thresholds.json").open() as fh:
            return json.load(fh)
    with open(path) as fh:
        return json.load(fh)


SOFA_TABLE = load_sofa_table()


def band_points(value, spec):
    points = 0
    for bound, p in zip(spec["bounds"], spec["points"]):
        if (spec["direction"] == "up" and value >= bound) or (spec["direction"] == "down" and value < bound):
            points = p
    return points


def sofa_components(latest, table=SOFA_TABLE):
    """Subscores from the latest known values (a dict keyed by parameter id)."""
    comps = table["components"]
    out = [0, 0, 0, 0, 0]
    po2 = latest.get("pab_po2")
    if po2 is not None:
        out[0] = band_points(po2 * table["kpa_to_mmhg"] / table["fio2_assumed"], comps["respiration"])
    if latest.get("b_platelets") is not None:
        out[1] = band_points(latest["b_platelets"], comps["coagulation"])
    if latest.get("p_bilirubin") is not None:
        out[2] = band_points(latest["p_bilirubin"], comps["liver"])
    sbp, dbp = latest.get("systolic_bp"), latest.get("diastolic_bp")
    if sbp is not None and dbp is not None:
        out[3] = band_points((sbp + 2.0 * dbp) / 3.0, comps["cardiovascular"])
    if latest.get("p_creatinine") is not None:
        out[4] = band_points(latest["p_creatinine"] / table["creatinine_umol_per_mgdl"], comps["renal"])
    return out


SOFA_INPUTS = ("pab_po2", "b_platelets", "p_bilirubin", "systolic_bp", "diastolic_bp", "p_creatinine")
_SOFA_CODES = {CODE[p]: p for p in SOFA_INPUTS}


@dataclass
class SofaSeries:
    """Step function: one point per time at which any SOFA input was updated."""
    times: np.ndarray
    totals: np.ndarray
    components: np.ndarray

    def value_at(self, t):
        i = bisect.bisect_right(self.times, t) - 1
        return int(self.totals[i]) if i >= 0 else 0


def compute_sofa_series(adm, table=SOFA_TABLE):
    latest = {}
    times, totals, comps = [], [], []
    sel = np.isin(adm.codes, list(_SOFA_CODES))
    ts, cs, vs = adm.times[sel], adm.codes[sel], adm.values[sel]
    i = 0
    while i < len(ts):
        t = ts[i]
        while i < len(ts) and ts[i] == t:
            latest[_SOFA_CODES[cs[i]]] = vs[i]
            i += 1
        c = sofa_components(latest, table)
        times.append(float(t))
        totals.append(sum(c))
        comps.append(c)
    return SofaSeries(np.array(times), np.array(totals, dtype=np.int64),
                      np.array(comps, dtype=np.int64).reshape(-1, 5))


@dataclass
class LabelResult:
    illness: str
    positive: bool
    onset_time: float = None
    flags: list = field(default_factory=list)

    @property
    def label(self):
        return self.illness if self.positive else "negative"


def detect_suspected_infection(adm):
    """Times of suspected infection: culture then antibiotic within 72 h, or antibiotic then culture within 24 h."""
    cultures = adm.times[adm.codes == CODE["culture_sample"]]
    abx = adm.times[adm.codes == CODE["antibiotic_administration"]]
    si = set()
    for c in cultures:
        lo = np.searchsorted(abx, c, side="left")
        if lo < len(abx) and abx[lo] - c <= SI_CULTURE_FIRST_HOURS:
            si.add(float(c))
    for a in abx:
        lo = np.searchsorted(cultures, a, side="right")
        if lo < len(cultures) and cultures[lo] - a <= SI_ANTIBIOTIC_FIRST_HOURS:
            si.add(float(a))
    return sorted(si)


def sofa_rise_in_window(series, lo, hi, rise=SOFA_RISE):
    """True if the SOFA step function rises by ``rise`` over its running minimum inside [lo, hi]."""
    running_min = series.value_at(lo)
    start = bisect.bisect_right(series.times, lo)
    stop = bisect.bisect_right(series.times, hi)
    for total in series.totals[start:stop]:
        if total - running_min >= rise:
            return True
        running_min = min(running_min, total)
    return False


def label_sepsis3(adm, table=SOFA_TABLE):
    si = detect_suspected_infection(adm)
    if not si:
        return LabelResult("sepsis", False)
    series = compute_sofa_series(adm, table)
    for s in si:
        if sofa_rise_in_window(series, s - SOFA_WINDOW_BEFORE, s + SOFA_WINDOW_AFTER):
            return LabelResult("sepsis", True, s)
    return LabelResult("sepsis", False)


def label_kdigo_aki(adm, habitual=None):
    """First time either creatinine rule fires.

    Rule 1: rise >= 26.5 umol/l over the lowest value of the preceding 48 h.
    Rule 2: value >= 1.5 x habitual level.  The habitual level is the 365-day
    mean supplied with the admission; without it the first in-admission value
    stands in and rule 2 is only applied during the following seven days.
    """
    times, vals = adm.series("p_creatinine")
    if len(times) == 0:
        return LabelResult("aki", False, flags=["no_creatinine"])
    flags = []
    habitual = adm.habitual_creatinine if habitual is None else habitual
    rule2_until = np.inf
    if habitual is None:
        first = times[0]
        habitual = float(vals[times == first].mean())
        rule2_until = first + KDIGO_FALLBACK_HOURS
        flags.append("habitual_fallback")
    for j in range(len(times)):
        t, v = times[j], vals[j]
        lo = np.searchsorted(times, t - KDIGO_DELTA_HOURS, side="left")
        hi = np.searchsorted(times, t, side="left")
        if hi > lo and v - vals[lo:hi].min() >= KDIGO_DELTA_UMOL:
            return LabelResult("aki", True, float(t), flags)
        if t <= rule2_until and v >= KDIGO_RATIO * habitual:
            return LabelResult("aki", True, float(t), flags)
    return LabelResult("aki", False, flags=flags)


def label_ali(adm):
    sel = (adm.codes == CODE["niv"]) | (adm.codes == CODE["cpap"])
    if not sel.any():
        return LabelResult("ali", False)
    return LabelResult("ali", True, float(adm.times[sel].min()))


def label_admission(adm):
    return {"sepsis": label_sepsis3(adm), "aki": label_kdigo_aki(adm), "ali": label_ali(adm)}


LABEL_COLUMNS = ["admission_id", "illness", "label", "onset_hours", "flags"]


def write_labels(admissions, labels, fh):
    """``labels``: list (aligned with admissions) of dicts illness -> LabelResult."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(LABEL_COLUMNS)
    for adm, lab in zip(admissions, labels):
        for ill in ILLNESSES:
            r = lab[ill]
            w.writerow([adm.admission_id, ill, int(r.positive),
                        "" if r.onset_time is None else repr(float(r.onset_time)), ";".join(r.flags)])


def read_labels(path):
    """admission_id -> {illness: LabelResult}."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LABEL_COLUMNS:
            raise ValueError(f"{path}: unexpected label columns {reader.fieldnames}")
        for row in reader:
            onset = float(row["onset_hours"]) if row["onset_hours"] else None
            flags = [f for f in row["flags"].split(";") if f]
            out.setdefault(row["admission_id"], {})[row["illness"]] = LabelResult(
                row["illness"], row["label"] == "1", onset, flags)
    return out
