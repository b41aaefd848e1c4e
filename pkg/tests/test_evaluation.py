import io
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xaiews import evaluation as ev, synth, tcn


def pair_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def ap_oracle(scores, labels):
    """Average precision by walking the distinct thresholds from high to low."""
    n_pos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for thr in sorted(set(scores), reverse=True):
        sel = [y for s, y in zip(scores, labels) if s >= thr]
        recall = sum(sel) / n_pos
        ap += (recall - prev_recall) * (sum(sel) / len(sel))
        prev_recall = recall
    return ap


def test_auroc_examples():
    assert ev.compute_auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert ev.auroc_rank([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert ev.compute_auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert ev.compute_auroc([3, 3, 3, 3], [0, 1, 0, 1]) == 0.5
    with pytest.raises(ev.UndefinedMetric):
        ev.compute_auroc([0.1, 0.2], [1, 1])
    with pytest.raises(ev.UndefinedMetric):
        ev.auroc_rank([0.1, 0.2], [0, 0])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 60), st.integers(1, 6))
def test_auroc_paths_agree_with_ties(seed, n, levels):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    y[0], y[1] = 0, 1
    s = rng.integers(0, levels, size=n).astype(float)
    a, b = ev.auroc_pairs(s, y), ev.auroc_rank(s, y)
    assert abs(a - b) <= 1e-12
    assert abs(a - pair_oracle(s, y)) <= 1e-12
    assert abs(ev.compute_auroc(np.exp(s) * 3 + 1, y) - a) <= 1e-12


def test_auroc_large_path():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, size=20_000)
    s = np.round(rng.normal(size=20_000) + y, 1)
    assert abs(ev.compute_auroc(s, y) - ev.auroc_pairs(s, y)) <= 1e-12


def test_midranks():
    assert ev.midranks(np.array([5.0, 1.0, 5.0, 3.0])).tolist() == [3.5, 1.0, 3.5, 2.0]


def test_auprc_examples():
    assert ev.compute_auprc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert ev.compute_auprc([0.9, 0.1], [1, 0]) == 1.0
    # one threshold for all tied scores: precision 0.5 at full recall
    assert ev.compute_auprc([1, 1, 1, 1], [1, 0, 1, 0]) == 0.5
    with pytest.raises(ev.UndefinedMetric):
        ev.compute_auprc([0.3, 0.4], [0, 0])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(1, 8))
def test_auprc_matches_threshold_walk(seed, n, levels):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    y[0] = 1
    s = rng.integers(0, levels, size=n).astype(float)
    assert abs(ev.compute_auprc(s, y) - ap_oracle(s.tolist(), y.tolist())) <= 1e-12


def test_auprc_random_scores_near_prevalence():
    rng = np.random.default_rng(1)
    n, pi = 200_000, 0.05
    y = rng.random(n) < pi
    ap = ev.compute_auprc(rng.random(n), y)
    assert abs(ap - pi) < 3 * math.sqrt(pi * (1 - pi) / (n * pi))


def test_confidence_interval():
    mean, lo, hi = ev.confidence_interval([0.8, 0.9, 0.7, 0.8, 0.8])
    half = 1.96 * np.std([0.8, 0.9, 0.7, 0.8, 0.8], ddof=1) / math.sqrt(5)
    assert mean == pytest.approx(0.8) and hi - mean == pytest.approx(half) and mean - lo == pytest.approx(half)
    m, lo, hi = ev.confidence_interval([0.7])
    assert m == 0.7 and math.isnan(lo) and math.isnan(hi)


@pytest.fixture(scope="module")
def cohort():
    spec = synth.CohortSpec.load(n_admissions=400, seed=8, prevalence={"sepsis": 0.06, "aki": 0.05, "ali": 0.05})
    return synth.generate_cohort(spec, with_labels=True)


def test_partitions_patient_disjoint(cohort):
    adms, labs = cohort
    deciles = ev.patient_deciles(adms, labs, "aki", seed=0)
    assert set(deciles.values()) == set(range(10))
    tests = []
    for f in range(ev.N_FOLDS):
        tr, va, te = ev.fold_split(adms, deciles, f)
        assert len(tr) + len(va) + len(te) == len(adms)
        pats = [{adms[i].patient_id for i in part} for part in (tr, va, te)]
        assert not (pats[0] & pats[1]) and not (pats[0] & pats[2]) and not (pats[1] & pats[2])
        assert any(labs[i]["aki"].positive for i in te)
        tests.append(set(te.tolist()))
    for a, b in itertools.combinations(tests, 2):
        assert not a & b


def test_stratification_error(cohort):
    adms, labs = cohort
    few = [dict(l) for l in labs]
    seen = 0
    for l in few:
        if l["ali"].positive:
            seen += 1
            if seen > 5:
                l["ali"] = type(l["ali"])("ali", False)
    with pytest.raises(ev.StratificationError):
        ev.patient_deciles(adms, few, "ali")


def test_negative_window_ends_in_range(cohort):
    adms, _ = cohort
    ends = ev.negative_window_ends(adms, seed=4)
    for a, e in zip(adms, ends):
        assert min(24.0, a.length_of_stay) <= e <= a.length_of_stay
    assert np.array_equal(ends, ev.negative_window_ends(adms, seed=4))


def test_subsample_negatives_keeps_positives():
    ws = ev.WindowSet(np.arange(100), np.zeros(100), (np.arange(100) % 10 == 0).astype(np.int64))
    out = ev.subsample_negatives(ws, 2, ev.make_rng(0))
    assert out.y.sum() == 10 and len(out.y) == 30
    assert ev.subsample_negatives(ws, None, None) is ws


def test_constant_and_cheating_models(cohort):
    adms, labs = cohort
    by_id = {a.admission_id: l for a, l in zip(adms, labs)}
    const = ev.cross_validate(adms, labs, lambda adm, end: 0.3, "sepsis", 0)
    assert [r["auroc"] for r in const.folds] == [0.5] * 5

    def cheat(adm, end):
        return float(by_id[adm.admission_id]["sepsis"].positive)

    res = ev.cross_validate(adms, labs, cheat, "sepsis", 6)
    assert [r["auroc"] for r in res.folds] == [1.0] * 5
    assert res.auroc[0] == 1.0


def test_baseline_rows_reproducible_and_counted(cohort):
    adms, labs = cohort
    rows = ev.horizon_sweep(adms, labs, "ali", models=("mews", "sofa"))
    assert len(rows) == 5 * 2 * 5
    assert rows == ev.horizon_sweep(adms, labs, "ali", models=("mews", "sofa"))
    assert {r["hours_before_onset"] for r in rows} == {0, 3, 6, 12, 24}
    buf = io.StringIO()
    ev.write_metrics(rows, buf)
    assert buf.getvalue().splitlines()[0] == ",".join(ev.METRIC_COLUMNS)


def test_sweep_with_trained_models(cohort, tmp_path):
    adms, labs = cohort
    cfg = tcn.TcnConfig(filters=8, max_epochs=2, patience=2)
    settings = ev.EvalSettings(folds=(0,), train_negative_ratio=3, tcn_config=cfg)
    rows = ev.horizon_sweep(adms, labs, "aki", horizons=(0, 24), settings=settings)
    assert len(rows) == 2 * 4
    for r in rows:
        assert 0.0 <= r["auroc"] <= 1.0 and 0.0 <= r["auprc"] <= 1.0
    path = tmp_path / "m.csv"
    with open(path, "w") as fh:
        ev.write_metrics(rows, fh)
    back = ev.read_metrics(path)
    assert [(r["model"], r["hours_before_onset"]) for r in back] == [(r["model"], r["hours_before_onset"]) for r in rows]
    assert all(abs(a["auroc"] - b["auroc"]) < 1e-10 for a, b in zip(rows, back))
    again = ev.horizon_sweep(adms, labs, "aki", horizons=(0, 24), settings=settings)
    assert again == rows


def test_warm_start_chains_horizons(cohort):
    adms, labs = cohort
    cfg = tcn.TcnConfig(filters=8, max_epochs=2, patience=2)
    cold = ev.horizon_sweep(adms, labs, "aki", models=("tcn", "mews"), horizons=(0, 24),
                            settings=ev.EvalSettings(folds=(0,), train_negative_ratio=3, tcn_config=cfg))
    warm_settings = ev.EvalSettings(folds=(0,), train_negative_ratio=3, tcn_config=cfg, warm_start=True)
    warm = ev.horizon_sweep(adms, labs, "aki", models=("tcn", "mews"), horizons=(0, 24), settings=warm_settings)
    key = [(r["hours_before_onset"], r["fold"], r["model"]) for r in cold]
    assert [(r["hours_before_onset"], r["fold"], r["model"]) for r in warm] == key
    # the first horizon trains from scratch either way; later TCNs start from it
    assert warm[:2] == cold[:2]
    assert warm[3] == cold[3]
    assert warm[2]["auroc"] != cold[2]["auroc"]
    assert warm == ev.horizon_sweep(adms, labs, "aki", models=("tcn", "mews"), horizons=(0, 24),
                                    settings=warm_settings)


def test_baselines_do_not_see_the_window_end():
    from xaiews.ehr import Admission
    from xaiews.labels import LabelResult
    adm = Admission.from_events("A", "P", 100.0, [(50.0, "systolic_bp", 50.0)])
    ws = ev.WindowSet(np.array([0]), np.array([50.0]), np.array([1]))
    ctx = ev.FitContext([adm], [{"aki": LabelResult("aki", True, 50.0)}], "aki", 0, ws, ws)
    assert ev.score_windows("mews", ctx, ws).tolist() == [0.0]
