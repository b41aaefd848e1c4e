"""Seeded synthetic cohort whose labels are confirmed by the real labelers.

Every admission gets per-patient baselines, sparse lab and vital sampling,
optional chronic derangements and transient episodes.  Positives additionally
carry an illness signature: affected parameters ramp from baseline towards a
shifted level over the hours before onset, so windows further from onset hold
less signal.  Each emitted admission is re-labelled with :mod:`labels`; a
mismatch triggers a redraw (new attempt seed) and 100 failed attempts raise.
"""
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .ehr import PARAMETERS, Admission
from .labels import ILLNESSES, label_admission

MAX_ATTEMPTS = 100
MIN_ONSET = 25.0
VITALS = {"systolic_bp", "diastolic_bp", "resp_rate", "pulse", "spo2", "temperature"}


class GeneratorError(RuntimeError):
    pass


def _default_spec_dict():
    with resources.files("xaiews.data").joinpath("cohort_default.json").open() as fh:
        return json.load(fh)


@dataclass
class CohortSpec:
    raw: dict = field(default_factory=_default_spec_dict)

    @classmethod
    def load(cls, path=None, **overrides):
        d = _default_spec_dict()
        if path is not None:
            with open(path) as fh:
                user = json.load(fh)
            if user.get("version", 1) != 1:
                raise ValueError(f"{path}: unsupported cohort spec version")
            d.update(user)
        d.update(overrides)
        spec = cls(d)
        spec.validate()
        return spec

    def validate(self):
        for ill, p in self.raw["prevalence"].items():
            if ill not in ILLNESSES or not 0.0 <= p < 1.0:
                raise ValueError(f"bad prevalence {ill}={p}")
        if sum(self.raw["prevalence"].values()) >= 1.0:
            raise ValueError("prevalences must sum to < 1")
        known = set(PARAMETERS)
        for name, sig in self.raw["signatures"].items():
            bad = set(sig["shifts"]) - known
            if bad:
                raise ValueError(f"signature {name} references unknown parameters {sorted(bad)}")

    @property
    def n_admissions(self):
        return int(self.raw["n_admissions"])

    @property
    def seed(self):
        return int(self.raw["seed"])


def _rng(*key):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def assign_illnesses(spec):
    """Intended class per admission index: exact counts round(n * prevalence), seeded placement."""
    n = spec.n_admissions
    counts = [int(round(n * spec.raw["prevalence"].get(ill, 0.0))) for ill in ILLNESSES]
    classes = ["negative"] * n
    order = _rng(spec.seed, 0xC0).permutation(n)
    k = 0
    for ill, c in zip(ILLNESSES, counts):
        for i in order[k:k + c]:
            classes[i] = ill
        k += c
    return classes


def assign_patients(spec):
    n = spec.n_admissions
    n_patients = max(1, int(round(n / spec.raw["admissions_per_patient"])))
    return _rng(spec.seed, 0xA7).integers(0, n_patients, size=n)


def _truncnorm(rng, sd, size, k):
    return np.clip(rng.standard_normal(size), -k, k) * sd


def _ramp(t, onset, duration):
    return np.clip((t - (onset - duration)) / duration, 0.0, 1.0)


class _Draft:
    """Mutable event collection for one admission attempt."""

    def __init__(self, spec, rng, los):
        self.spec = spec
        self.rng = rng
        self.los = los
        self.times = {p: [] for p in PARAMETERS}
        self.extra = []

    def sample_times(self, param, start, stop, interval):
        if stop <= start or interval <= 0:
            return
        n = self.rng.poisson((stop - start) / interval)
        self.times[param].extend(self.rng.uniform(start, stop, size=n).tolist())


def generate_admission(spec, index, intended, patient_id, attempt):
    raw = spec.raw
    rng = _rng(spec.seed, index, attempt)
    params = raw["parameters"]
    los = float(np.clip(raw["los_median_hours"] * np.exp(raw["los_log_sd"] * rng.standard_normal()),
                        raw["los_min_hours"], raw["los_max_hours"]))
    onset = None
    if intended != "negative":
        lo = raw["onset_min_hours"]
        onset = float(rng.uniform(lo, max(lo + 1.0, min(los, raw["los_max_hours"] - 30.0))))
        los = max(los, onset + 30.0)

    d = _Draft(spec, rng, los)
    base = {p: params[p]["mean"] + params[p]["between_sd"] * float(np.clip(rng.standard_normal(), -2.5, 2.5))
            for p in PARAMETERS}
    chronic = {}
    if rng.random() < raw["chronic_probability"]:
        names = sorted(raw["chronic"])
        for name in rng.choice(names, size=int(rng.integers(1, 3)), replace=False):
            for p, shift in raw["chronic"][name].items():
                chronic[p] = chronic.get(p, 0.0) + shift
    for p, s in chronic.items():
        base[p] += s

    for p in PARAMETERS:
        if p == "egfr":
            continue
        d.sample_times(p, 0.0, los, params[p]["interval_hours"])

    # illness signature: (shift dict, onset, duration, severity)
    sig = None
    if intended != "negative":
        s = raw["signatures"][intended]
        duration = float(rng.uniform(*s["ramp_hours"]))
        severity = float(rng.uniform(*s["severity"]))
        sig = (s["shifts"], onset, duration, severity)
        dense = s["dense_sampling_hours"]
        # fixed parameter order: a set would tie the RNG draws to string hashing
        sig_params = [p for p in PARAMETERS if p in s["shifts"] or (intended == "aki" and p == "p_creatinine")]
        for p in sig_params:
            step = dense["vital"] if p in VITALS else dense["lab"]
            d.sample_times(p, max(0.0, onset - duration), min(los, onset + 24.0), step)

    transient = None
    if rng.random() < raw["transient_probability"]:
        src = raw["signatures"][ILLNESSES[int(rng.integers(0, 3))]]["shifts"]
        transient = (src, float(rng.uniform(0.0, los)), float(rng.uniform(*raw["transient_hours"])),
                     float(rng.uniform(*raw["transient_strength"])))

    aki_rise = None
    if intended == "aki":
        aki_rise = float(rng.uniform(*raw["signatures"]["aki"]["creatinine_rise"]))
        d.times["p_creatinine"].append(onset)

    k = raw["noise_truncation_sd"]
    events = []
    for p in PARAMETERS:
        if p == "egfr" or not d.times[p]:
            continue
        t = np.sort(np.array(d.times[p]))
        v = np.full(len(t), base[p])
        if sig is not None and p in sig[0]:
            shifts, on, dur, sev = sig
            v += shifts[p] * sev * _ramp(t, on, dur)
        if transient is not None and p in transient[0] and p != "p_creatinine":
            shifts, mid, width, strength = transient
            v += shifts[p] * strength * np.clip(1.0 - np.abs(t - mid) / (0.5 * width), 0.0, 1.0)
        if aki_rise is not None and p == "p_creatinine":
            _, on, dur, _ = sig
            v += aki_rise * _ramp(t, on, dur) ** 2
        v += _truncnorm(rng, params[p]["noise_sd"], len(t), k)
        v = np.clip(v, params[p]["lo"], params[p]["hi"])
        if p == "p_creatinine":
            kf, spread = raw["egfr_from_creatinine"]
            factor = kf * (1.0 + spread * float(np.clip(rng.standard_normal(), -2, 2)))
            egfr = np.clip(factor / v, params["egfr"]["lo"], params["egfr"]["hi"])
            events.extend(zip(t, ["egfr"] * len(t), egfr))
        events.extend(zip(t, [p] * len(t), v))

    if intended == "sepsis":
        lo_p, hi_p = raw["sepsis_platelets_after_onset"]
        delay = float(rng.uniform(*raw["sepsis_antibiotic_delay_hours"]))
        events.append((onset, "culture_sample", 1.0))
        events.append((min(los, onset + delay), "antibiotic_administration", 1.0))
        for _ in range(2):
            events.append((min(los, onset + float(rng.uniform(2.0, 20.0))), "b_platelets",
                           float(rng.uniform(lo_p, hi_p))))
    elif intended == "ali":
        events.append((onset, "niv" if rng.random() < 0.5 else "cpap", 1.0))
    elif rng.random() < raw["suspected_infection_distractor_probability"]:
        c = float(rng.uniform(0.0, los))
        events.append((c, "culture_sample", 1.0))
        events.append((min(los, c + float(rng.uniform(0.0, 48.0))), "antibiotic_administration", 1.0))

    habitual = None
    if rng.random() < raw["habitual_creatinine_probability"]:
        habitual = float(base["p_creatinine"] * rng.uniform(0.95, 1.05))
    age = float(np.clip(55.0 + 18.0 * rng.standard_normal(), 18.0, 100.0))
    sex = "M" if rng.random() < 0.4586 else "F"
    return Admission.from_events(f"A{index:06d}", patient_id, los, events, age=age, sex=sex,
                                 habitual_creatinine=habitual)


def _confirmed(adm, intended):
    labels = label_admission(adm)
    for ill in ILLNESSES:
        r = labels[ill]
        if ill == intended:
            if not r.positive or r.onset_time < MIN_ONSET:
                return None
        elif r.positive:
            return None
    return labels


def generate_cohort(spec, indices=None, with_labels=False):
    """Admissions (and optionally their labels) for the given indices (default: all)."""
    classes = assign_illnesses(spec)
    patients = assign_patients(spec)
    indices = range(spec.n_admissions) if indices is None else indices
    admissions, labels = [], []
    for i in indices:
        pid = f"P{int(patients[i]):06d}"
        for attempt in range(MAX_ATTEMPTS):
            adm = generate_admission(spec, i, classes[i], pid, attempt)
            lab = _confirmed(adm, classes[i])
            if lab is not None:
                break
        else:
            raise GeneratorError(f"admission {i}: no {classes[i]} draw confirmed by the labelers "
                                 f"after {MAX_ATTEMPTS} attempts")
        admissions.append(adm)
        labels.append(lab)
    return (admissions, labels) if with_labels else admissions
