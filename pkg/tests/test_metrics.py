from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hprune.compactor import make_plan
from hprune.metrics import (RetentionPattern, TrialScores, accuracy, cosine_scores, eer, min_dcf, pattern_distance,
                            pattern_from_keep, retention_report)
from hprune.model import PrunableModel, preset


def _operating_points(tgt, non):
    """(FRR, FAR) as exact fractions at every threshold below, between and above all scores."""
    values = sorted(set(tgt) | set(non))
    thresholds = [values[0] - 1.0] + [(a + b) / 2 for a, b in zip(values, values[1:])] + [values[-1] + 1.0]
    points = []
    for th in thresholds:
        frr = Fraction(sum(1 for s in tgt if s < th), len(tgt))
        far = Fraction(sum(1 for s in non if s >= th), len(non))
        points.append((frr, far))
    return points


def oracle_eer(tgt, non) -> float:
    pts = _operating_points(tgt, non)
    for (r0, a0), (r1, a1) in zip(pts, pts[1:]):
        d0, d1 = r0 - a0, r1 - a1
        if d0 == 0:
            return float(r0)
        if d0 < 0 < d1 or d1 == 0:
            lam = -d0 / (d1 - d0)
            return float(r0 + lam * (r1 - r0))
    return float(pts[-1][0])


def oracle_min_dcf(tgt, non, p=0.05, cm=1.0, cf=1.0) -> float:
    pts = _operating_points(tgt, non)
    best = min(cm * p * float(r) + cf * (1 - p) * float(a) for r, a in pts)
    return best / min(cm * p, cf * (1 - p))


def test_eer_examples():
    assert eer(TrialScores([0.9, 0.8], [0.1, 0.2])) == 0.0
    assert eer(TrialScores([0.9, 0.8, 0.4], [0.6, 0.2, 0.1])) == pytest.approx(1 / 3, abs=1e-15)
    assert eer(TrialScores([0.1, 0.2], [0.8, 0.9])) == 1.0


def test_min_dcf_examples():
    assert min_dcf(TrialScores([0.9, 0.8], [0.1, 0.2])) == 0.0
    assert min_dcf(TrialScores([0.5, 0.5, 0.5], [0.5, 0.5])) == pytest.approx(1.0, abs=1e-15)


def test_empty_or_nonfinite_scores_rejected():
    with pytest.raises(ValueError):
        TrialScores([], [0.1])
    with pytest.raises(ValueError):
        TrialScores([np.nan], [0.1])


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.integers(1, 60), st.integers(1, 60), st.booleans())
def test_metrics_match_exhaustive_oracle(seed, n_t, n_n, ties):
    rng = np.random.default_rng(seed)
    if ties:
        tgt, non = rng.integers(0, 8, n_t).astype(float), rng.integers(-2, 6, n_n).astype(float)
    else:
        tgt, non = rng.normal(1.0, 1.0, n_t), rng.normal(0.0, 1.0, n_n)
    scores = TrialScores(tgt, non)
    assert abs(eer(scores) - oracle_eer(list(tgt), list(non))) < 1e-9
    assert abs(min_dcf(scores) - oracle_min_dcf(list(tgt), list(non))) < 1e-9
    assert abs(min_dcf(scores, 0.3, 2.0, 1.0) - oracle_min_dcf(list(tgt), list(non), 0.3, 2.0, 1.0)) < 1e-9


def test_metrics_match_oracle_on_a_large_set():
    rng = np.random.default_rng(7)
    tgt, non = rng.normal(0.8, 1.0, 500), rng.normal(0.0, 1.0, 500)
    scores = TrialScores(tgt, non)
    assert abs(eer(scores) - oracle_eer(list(tgt), list(non))) < 1e-9
    assert abs(min_dcf(scores) - oracle_min_dcf(list(tgt), list(non))) < 1e-12


@given(st.integers(0, 2**32 - 1))
def test_eer_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    tgt, non = rng.integers(0, 30, 40).astype(float), rng.integers(-10, 20, 30).astype(float)
    base = eer(TrialScores(tgt, non))
    assert eer(TrialScores(np.exp(tgt / 7), np.exp(non / 7))) == base
    assert eer(TrialScores(3 * tgt - 11, 3 * non - 11)) == base


def test_accuracy_and_cosine_scores():
    assert accuracy([2.0, -1.0, 0.5, -3.0], [1, 0, 0, 0]) == 0.75
    emb = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    trials = np.array([[0, 1, 1], [0, 2, 0]])
    s = cosine_scores(emb, trials)
    assert s.target.tolist() == [1.0] and s.nontarget.tolist() == [0.0]


def test_retention_examples():
    model = PrunableModel(preset("small"))
    fabric = model.fabric
    full = pattern_from_keep(fabric, np.ones(fabric.num_gates, dtype=bool))
    assert np.all(full.vector() == 1.0)
    keep = np.ones(fabric.num_gates, dtype=bool)
    lo, _ = fabric.span("mhsa_head", 0)
    keep[lo : lo + 2] = False
    pattern = retention_report(make_plan(model, keep))
    assert pattern.fraction("mhsa_head")[0] == 0.5
    assert pattern_distance(pattern, pattern) == 0.0
    assert pattern_distance(pattern, full) == 0.5


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1))
def test_retention_recomputes_from_plan_exactly(seed):
    model = PrunableModel(preset("small"))
    keep = np.random.default_rng(seed).uniform(size=model.fabric.num_gates) > 0.5
    plan = make_plan(model, keep)
    a, b = retention_report(plan), pattern_from_keep(model.fabric, keep)
    for kind in a.kinds():
        np.testing.assert_array_equal(a.kept[kind], b.kept[kind])
        np.testing.assert_array_equal(a.total[kind], b.total[kind])
    assert np.all((a.vector() >= 0) & (a.vector() <= 1))


def test_retention_csv_round_trip(tmp_path):
    model = PrunableModel(preset("small"))
    keep = np.random.default_rng(3).uniform(size=model.fabric.num_gates) > 0.3
    pattern = pattern_from_keep(model.fabric, keep)
    pattern.to_csv(tmp_path / "r.csv")
    back = RetentionPattern.from_csv(tmp_path / "r.csv")
    assert back.to_csv() == pattern.to_csv()
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "layer,kind,kept,total,fraction"


def test_retention_from_fabric_uses_open_gates():
    model = PrunableModel(preset("small"))
    model.fabric.log_alpha.data[:] = -10.0
    assert np.all(retention_report(model.fabric).vector() == 0.0)
    with pytest.raises(TypeError):
        retention_report(object())
