"""Metrics: pairwise / threshold-sweep oracles and aggregation arithmetic."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afpa import metrics
from afpa.errors import ContractError, DataError, MetricUndefinedError
from afpa.metrics import ScoreRecord


def records_from(normal, anomalous, machine=("fan", "id_00")):
    t, i = machine
    recs = [ScoreRecord(f"n{k}", t, i, "normal", float(s)) for k, s in enumerate(normal)]
    recs += [ScoreRecord(f"a{k}", t, i, "anomalous", float(s)) for k, s in enumerate(anomalous)]
    return recs


# ---------------------------------------------------------------------------
# oracles


def auc_pairwise(normal, anomalous):
    wins = 0.0
    for a in anomalous:
        for n in normal:
            if a > n:
                wins += 1.0
            elif a == n:
                wins += 0.5
    return wins / (len(normal) * len(anomalous))


def pauc_threshold_sweep(normal, anomalous, p, thresholds):
    """Trapezoid-integrate swept (fpr, tpr) samples up to fpr = p."""
    normal = np.asarray(normal, dtype=np.float64)
    anomalous = np.asarray(anomalous, dtype=np.float64)
    fpr = np.array([np.mean(normal >= t) for t in thresholds])
    tpr = np.array([np.mean(anomalous >= t) for t in thresholds])
    area = 0.0
    prev_f, prev_t = 0.0, 0.0
    for f, t in zip(fpr, tpr):
        if f == prev_f:
            prev_t = t
            continue
        if f <= p:
            area += (f - prev_f) * (t + prev_t) / 2.0
        else:
            if prev_f < p:
                t_at_p = prev_t + (t - prev_t) * (p - prev_f) / (f - prev_f)
                area += (p - prev_f) * (prev_t + t_at_p) / 2.0
            prev_f, prev_t = f, t
            break
        prev_f, prev_t = f, t
    return area / p


def sweep_thresholds(scores):
    """Every breakpoint: the unique scores plus midpoints, descending."""
    uniq = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (uniq[:-1] + uniq[1:]) / 2.0
    grid = np.concatenate([uniq, mids, [uniq[0] - 1.0, uniq[-1] + 1.0]])
    return np.sort(grid)[::-1]


# ---------------------------------------------------------------------------
# auc


def test_auc_perfect_separation():
    assert metrics.auc(records_from([0.1, 0.2], [0.8, 0.9])) == 1.0


def test_auc_three_of_four_pairs():
    assert metrics.auc(records_from([0.1, 0.7], [0.5, 0.9])) == 0.75


def test_auc_all_ties_is_half():
    assert metrics.auc(records_from([0.5, 0.5, 0.5], [0.5, 0.5])) == 0.5


def test_auc_single_class_undefined():
    with pytest.raises(MetricUndefinedError):
        metrics.auc(records_from([0.1, 0.2], []))


def test_auc_matches_pairwise_oracle_randomized():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = rng.integers(1, 30)
        m = rng.integers(1, 30)
        normal = np.round(rng.uniform(0, 1, n), 2)  # rounding injects ties
        anomalous = np.round(rng.uniform(0, 1, m), 2)
        got = metrics.auc(records_from(normal, anomalous))
        want = auc_pairwise(normal, anomalous)
        assert abs(got - want) < 1e-12


@given(st.lists(st.integers(0, 20), min_size=1, max_size=30),
       st.lists(st.integers(0, 20), min_size=1, max_size=30))
@settings(max_examples=100, deadline=None)
def test_auc_pairwise_property(normal, anomalous):
    got = metrics.auc(records_from(normal, anomalous))
    assert abs(got - auc_pairwise(normal, anomalous)) < 1e-12


def test_auc_invariant_under_monotone_transform():
    rng = np.random.default_rng(1)
    normal = rng.uniform(0, 1, 25)
    anomalous = rng.uniform(0.2, 1.2, 20)
    base = metrics.auc(records_from(normal, anomalous))
    for f in (np.exp, lambda x: 3 * x - 7, lambda x: x ** 3):
        assert abs(metrics.auc(records_from(f(normal), f(anomalous))) - base) < 1e-12


def test_auc_label_flip_complements():
    rng = np.random.default_rng(2)
    normal = rng.uniform(0, 1, 15)
    anomalous = rng.uniform(0, 1, 12)  # continuous, no ties
    a = metrics.auc(records_from(normal, anomalous))
    b = metrics.auc(records_from(anomalous, normal))
    assert abs(a - (1.0 - b)) < 1e-12


# ---------------------------------------------------------------------------
# pauc


def test_pauc_perfect_separation_any_p():
    recs = records_from([0.0, 0.1], [0.8, 0.9])
    for p in (0.05, 0.1, 0.5, 1.0):
        assert metrics.pauc(recs, p) == 1.0


def test_pauc_at_one_equals_auc():
    rng = np.random.default_rng(3)
    for _ in range(25):
        normal = np.round(rng.uniform(0, 1, rng.integers(2, 40)), 2)
        anomalous = np.round(rng.uniform(0, 1, rng.integers(2, 40)), 2)
        recs = records_from(normal, anomalous)
        assert abs(metrics.pauc(recs, 1.0) - metrics.auc(recs)) < 1e-12


def test_pauc_dense_million_threshold_sweep():
    rng = np.random.default_rng(4)
    normal = rng.uniform(0, 1, 10)
    anomalous = rng.uniform(0.1, 1.1, 10)
    scores = np.concatenate([normal, anomalous])
    thresholds = np.linspace(scores.min() - 1e-3, scores.max() + 1e-3, 10 ** 6)[::-1]
    got = metrics.pauc(records_from(normal, anomalous), 0.1)
    want = pauc_threshold_sweep(normal, anomalous, 0.1, thresholds)
    assert abs(got - want) < 1e-6


def test_pauc_matches_breakpoint_sweep_with_ties():
    rng = np.random.default_rng(5)
    for _ in range(50):
        normal = np.round(rng.uniform(0, 1, rng.integers(2, 50)), 1)
        anomalous = np.round(rng.uniform(0, 1, rng.integers(2, 50)), 1)
        p = float(rng.choice([0.05, 0.1, 0.3, 1.0]))
        got = metrics.pauc(records_from(normal, anomalous), p)
        want = pauc_threshold_sweep(normal, anomalous, p,
                                    sweep_thresholds(np.concatenate([normal, anomalous])))
        assert abs(got - want) < 1e-9


def test_pauc_never_exceeds_one():
    rng = np.random.default_rng(6)
    for _ in range(20):
        recs = records_from(rng.uniform(0, 1, 10), rng.uniform(0, 1, 10))
        assert metrics.pauc(recs, 0.1) <= 1.0 + 1e-12


def test_pauc_rejects_bad_p():
    recs = records_from([0.1], [0.9])
    for p in (0.0, -0.1, 1.5):
        with pytest.raises(ContractError):
            metrics.pauc(recs, p)


# ---------------------------------------------------------------------------
# report


def test_report_single_machine_perfect():
    rep = metrics.report(records_from([0.1, 0.2], [0.8, 0.9]))
    assert rep.overall == (1.0, 1.0)


def test_report_mean_of_two_types():
    recs = records_from([0.1, 0.2], [0.8, 0.9], ("fan", "id_00"))
    # second type: AUC 0.75 exactly (3 of 4 pairs) with matching pAUC cell
    recs += records_from([0.1, 0.7], [0.5, 0.9], ("pump", "id_00"))
    rep = metrics.report(recs)
    assert abs(rep.per_type["fan"][0] - 1.0) < 1e-12
    assert abs(rep.per_type["pump"][0] - 0.75) < 1e-12
    assert abs(rep.overall[0] - 0.875) < 1e-12


def test_report_table_arithmetic_mean_law():
    per_id = {
        ("a", "id_00"): (0.8, 0.7),
        ("b", "id_00"): (0.9, 0.8),
    }
    rep = metrics.aggregate(per_id)
    assert abs(rep.overall[0] - 0.85) < 1e-12
    assert abs(rep.overall[1] - 0.75) < 1e-12


def test_report_undefined_cell_flagged_and_excluded():
    recs = records_from([0.1, 0.2], [0.8], ("fan", "id_00"))
    recs += [ScoreRecord("x", "fan", "id_02", "normal", 0.3)]  # single class
    rep = metrics.report(recs)
    assert rep.per_id[("fan", "id_02")] is None
    assert ("fan", "id_02") in rep.undefined
    assert rep.per_type["fan"] == (1.0, 1.0)
    text = metrics.report_to_text(rep)
    assert "undefined" in text


def test_report_csv_roundtrip_text(tmp_path):
    rep = metrics.report(records_from([0.1, 0.2], [0.8, 0.9]))
    path = tmp_path / "report.csv"
    text = metrics.report_to_csv(rep, path, config_hash="abc123")
    assert path.read_text() == text
    lines = text.strip().splitlines()
    assert lines[0] == "# config_hash=abc123"
    assert lines[1] == "level,machine_type,machine_id,auc,pauc"


# ---------------------------------------------------------------------------
# score CSV


def test_score_csv_header_and_roundtrip(tmp_path):
    recs = records_from([0.12345678901234], [0.987654321], ("fan", "id_00"))
    path = tmp_path / "scores.csv"
    metrics.write_scores(path, recs)
    first = path.read_text().splitlines()[0]
    assert first == "clip_id,machine_type,machine_id,label,score"
    back = metrics.read_scores(path)
    assert back == recs  # repr round trip keeps float bits


def test_score_csv_bad_header(tmp_path):
    path = tmp_path / "scores.csv"
    path.write_text("a,b,c\n")
    with pytest.raises(DataError):
        metrics.read_scores(path)
