import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ortho_group

import oracles
from knucklenet.errors import MetricError, ProtocolError
from knucklenet.metrics import (DegenerateCurveWarning, EvalReport, HistogramScores, ROCCurve, ScoreSet,
                                compute_crr, compute_di, compute_eer, compute_roc, eer, emit_report,
                                match_score, score_all_pairs, score_matrix, stream_histogram)
from knucklenet.trainer import LossTrace, TraceRecord


def test_match_score_basics():
    e1, e2 = np.eye(8)[0], np.eye(8)[1]
    assert match_score(e1, e1) == 0.0
    assert match_score(e1, -e1) == 4.0
    assert match_score(e1, e2) == 2.0
    rng = np.random.default_rng(0)
    a, b = oracles.random_unit(rng, 2, 16)
    assert match_score(a, b) == match_score(b, a) >= 0


def test_score_matrix_matches_pairwise():
    rng = np.random.default_rng(1)
    g, p = oracles.random_unit(rng, 7, 5), oracles.random_unit(rng, 4, 5)
    m = score_matrix(g, p)
    assert m.shape == (4, 7)
    assert np.allclose(m, [[match_score(x, y) for y in g] for x in p], atol=1e-15)


def test_score_all_pairs_partition():
    rng = np.random.default_rng(2)
    g, p = oracles.random_unit(rng, 2, 4), oracles.random_unit(rng, 2, 4)
    s = score_all_pairs(g, ["a", "b"], p, ["a", "b"])
    assert (s.genuine.size, s.impostor.size) == (2, 2)
    g, p = oracles.random_unit(rng, 12, 4), oracles.random_unit(rng, 9, 4)
    s = score_all_pairs(g, list("aabbccddeeff"), p, list("abcdefxyz"))
    assert s.genuine.size + s.impostor.size == 12 * 9
    assert s.genuine.size == 12
    with pytest.raises(ProtocolError):
        score_all_pairs(g[:0], [], p, list("abcdefxyz"))


def test_roc_extremes_and_brute_counts():
    rng = np.random.default_rng(3)
    s = ScoreSet(rng.uniform(0, 2, 40), rng.uniform(1, 4, 60))
    roc = compute_roc(s)
    assert (roc.far[0], roc.frr[0]) == (0.0, 1.0)
    assert (roc.far[-1], roc.frr[-1]) == (1.0, 0.0)
    assert np.all(np.diff(roc.thresholds) > 0)
    assert np.all(np.diff(roc.far) >= 0) and np.all(np.diff(roc.frr) <= 0)
    for t, far, frr in zip(roc.thresholds[::7], roc.far[::7], roc.frr[::7]):
        assert (far, frr) == oracles.brute_rates(s.genuine, s.impostor, t)
    grid = compute_roc(s, thresholds=101)
    assert len(grid) == 101 and grid.thresholds[0] == 0.0 and grid.thresholds[-1] == 4.0


def test_empty_lists_are_metric_errors():
    with pytest.raises(MetricError):
        compute_roc(ScoreSet([], [1.0]))
    with pytest.raises(MetricError):
        ScoreSet([np.nan], [1.0])


def test_handcrafted_eer_follows_the_sweep():
    # FAR = FRR = 0.5 for every threshold in [0.15, 0.2): the sweep puts the EER at 50
    got = eer(ScoreSet([0.1, 0.2], [0.15, 0.3]))
    assert got == oracles.brute_eer([0.1, 0.2], [0.15, 0.3]) == 50.0


def test_perfect_separation():
    assert eer(ScoreSet([0.1, 0.2, 0.3], [1.0, 2.0])) == 0.0


def test_degenerate_curve_warns():
    roc = ROCCurve(np.array([0.0, 1.0]), np.array([0.2, 0.6]), np.array([0.1, 0.0]))
    with pytest.warns(DegenerateCurveWarning):
        assert np.isclose(compute_eer(roc), 15.0)


def test_di_cases():
    rng = np.random.default_rng(4)
    x = rng.normal(2, 0.3, 1000)
    assert compute_di(ScoreSet(x, x.copy())) == 0.0
    with pytest.raises(MetricError):
        compute_di(ScoreSet(np.zeros(5), np.full(5, 2.0)))
    g, i = rng.gamma(2, 0.2, 50), rng.gamma(5, 0.3, 70)
    expected = abs(i.mean() - g.mean()) / np.sqrt((g.var() + i.var()) / 2)
    assert np.isclose(compute_di(ScoreSet(g, i)), expected, rtol=1e-12)


def test_crr_geometric_nearest_and_self_match():
    g = np.zeros((2, 8))
    g[0, 0] = g[1, 1] = 1.0
    probe = np.zeros((1, 8))
    probe[0, :2] = (0.9, 0.435)
    probe /= np.linalg.norm(probe)
    assert compute_crr(g, ["s1", "s2"], probe, ["s1"]) == 100.0
    assert compute_crr(g, ["s1", "s2"], g.copy(), ["s1", "s2"]) == 100.0
    with pytest.raises(ProtocolError):
        compute_crr(g[:0], [], probe, ["s1"])


def test_crr_ties_pick_lowest_gallery_index():
    g = np.eye(4)[[0, 0]]
    assert compute_crr(g, ["a", "b"], np.eye(4)[[0]], ["a"]) == 100.0
    assert compute_crr(g, ["a", "b"], np.eye(4)[[0]], ["b"]) == 0.0


def test_crr_chance_level():
    rng = np.random.default_rng(5)
    rates = []
    for _ in range(30):
        g = oracles.random_unit(rng, 100, 32)
        p = oracles.random_unit(rng, 100, 32)
        rates.append(compute_crr(g, list(range(100)), p, list(rng.permutation(100))))
    assert abs(np.mean(rates) - 1.0) < 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_crr_invariant_under_rotation(seed):
    rng = np.random.default_rng(seed)
    g, p = oracles.random_unit(rng, 20, 6), oracles.random_unit(rng, 15, 6)
    gl, pl = list(rng.integers(0, 6, 20)), list(rng.integers(0, 6, 15))
    q = ortho_group.rvs(6, random_state=rng)
    assert compute_crr(g, gl, p, pl) == compute_crr(g @ q, gl, p @ q, pl)


def test_histogram_eer_matches_exact():
    rng = np.random.default_rng(6)
    g, p = oracles.random_unit(rng, 300, 8), oracles.random_unit(rng, 300, 8)
    p[:150] = g[:150] + rng.normal(0, 0.25, (150, 8))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    gl, pl = np.arange(300) % 100, np.arange(300) % 100
    exact = score_all_pairs(g, gl, p, pl)
    hist = stream_histogram(g, gl, p, pl, rows=64)
    assert (hist.genuine_count, hist.impostor_count) == (exact.genuine.size, exact.impostor.size)
    assert abs(eer(hist) - eer(exact)) <= 0.05
    assert np.isclose(compute_di(hist), compute_di(exact), rtol=1e-9)


def test_histograms_merge_associatively():
    rng = np.random.default_rng(7)
    s, lab = rng.uniform(0, 4, 1000), rng.random(1000) < 0.1
    one = HistogramScores.empty()
    one.add(s, lab)
    two = HistogramScores.empty()
    two.add(s[:400], lab[:400])
    two.add(s[400:], lab[400:])
    assert np.array_equal(one.genuine_counts, two.genuine_counts)
    assert np.array_equal(one.impostor_counts, two.impostor_counts)


def test_report_round_trip_and_files(tmp_path):
    rep = EvalReport(1.25, 97.5, 2.4, 300, 14700, 25760, "fki-2/3")
    assert EvalReport.from_json(rep.to_json()) == rep
    s = ScoreSet(np.array([0.1, 0.5, 0.9]), np.array([0.4, 1.2, 2.0, 3.0]))
    roc = compute_roc(s)
    trace = LossTrace([TraceRecord(1, 0.2, 0.2, 0.5), TraceRecord(2, 0.18, 0.25, 0.3)])
    paths = emit_report(rep, roc, tmp_path / "r", trace)
    rows = paths["roc"].read_text().splitlines()
    assert rows[0] == "threshold,far,frr" and len(rows) - 1 == len(roc)
    assert paths["loss"].read_text().splitlines()[0] == "iter,loss,beta,yield"
    first = {k: p.read_bytes() for k, p in paths.items()}
    paths = emit_report(rep, roc, tmp_path / "r", trace)
    assert first == {k: p.read_bytes() for k, p in paths.items()}
