import json

import numpy as np
import pytest
from sklearn.metrics import average_precision_score, balanced_accuracy_score

from probekit import metrics
from probekit.detector import DetectorNet, predict_patched
from probekit.errors import ContractError
from probekit.metrics import MetricsReport, ScoredSample


def _brute_ap(scores, labels):
    """Walk the ranked list; ties resolved by original index."""
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(labels)
    hits, total = 0, 0.0
    for k, i in enumerate(ranked, start=1):
        if labels[i] == 1:
            hits += 1
            total += hits / k
    return total / n_pos


def _brute_bacc(scores, labels):
    right = {0: 0, 1: 0}
    count = {0: 0, 1: 0}
    for s, y in zip(scores, labels):
        count[y] += 1
        right[y] += int((s > 0.5) == (y == 1))
    return 0.5 * (right[0] / count[0] + right[1] / count[1])


def _random_set(rng, ties=False):
    n = int(rng.integers(2, 51))
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = rng.integers(0, 5, n) / 4 if ties else rng.uniform(0, 1, n)
    return s, y


def test_hand_examples():
    assert metrics.balanced_accuracy([0.9, 0.9, 0.1, 0.9], [1, 1, 0, 0]) == 0.75
    assert metrics.average_precision([0.8, 0.9, 0.7], [1, 0, 1]) == pytest.approx(0.5 * 0.5 + 0.5 * 2 / 3, abs=1e-15)
    assert metrics.balanced_accuracy([0.9, 0.1], [1, 0]) == 1.0
    assert metrics.average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0


def test_metrics_match_brute_force():
    rng = np.random.default_rng(0)
    for i in range(200):
        s, y = _random_set(rng, ties=i % 2 == 0)
        assert abs(metrics.balanced_accuracy(s, y) - _brute_bacc(s, y)) <= 1e-12
        assert abs(metrics.balanced_accuracy(s, y) - balanced_accuracy_score(y, s > 0.5)) <= 1e-12
        assert abs(metrics.average_precision(s, y) - _brute_ap(list(s), list(y))) <= 1e-12


def test_ap_matches_library_without_ties():
    rng = np.random.default_rng(1)
    for _ in range(200):
        s, y = _random_set(rng)
        assert abs(metrics.average_precision(s, y) - average_precision_score(y, s)) <= 1e-12


def test_ap_monotone_transform_invariance():
    rng = np.random.default_rng(2)
    for _ in range(50):
        s, y = _random_set(rng, ties=True)
        s = np.clip(s, 1e-3, 1 - 1e-3)
        ap = metrics.average_precision(s, y)
        assert metrics.average_precision(np.log(s / (1 - s)), y) == ap
        assert metrics.average_precision(3 * s + 7, y) == ap
        assert metrics.average_precision(s**3, y) == ap


def test_bacc_threshold_preserving_transform():
    rng = np.random.default_rng(3)
    s, y = _random_set(rng)
    # fixes the 0.5 level set
    assert metrics.balanced_accuracy(0.5 + 2 * (s - 0.5) ** 3, y) == metrics.balanced_accuracy(s, y)


def test_order_invariance():
    rng = np.random.default_rng(4)
    for _ in range(50):
        s, y = _random_set(rng)
        p = rng.permutation(len(s))
        assert metrics.balanced_accuracy(s[p], y[p]) == metrics.balanced_accuracy(s, y)
        assert metrics.average_precision(s[p], y[p]) == pytest.approx(metrics.average_precision(s, y), abs=1e-15)


def test_duplicating_reals_keeps_bacc():
    rng = np.random.default_rng(5)
    s, y = _random_set(rng)
    real = y == 0
    s2, y2 = np.r_[s, s[real]], np.r_[y, y[real]]
    assert metrics.balanced_accuracy(s2, y2) == pytest.approx(metrics.balanced_accuracy(s, y), abs=1e-15)


def test_scored_samples_and_errors():
    items = [ScoredSample(0.8, 1, "gen_base"), ScoredSample(0.3, 0, "real")]
    assert metrics.balanced_accuracy(items) == 1.0
    assert metrics.as_dict(items[0])["source_tag"] == "gen_base"
    with pytest.raises(ContractError):
        metrics.balanced_accuracy([0.2, 0.7], [1, 1])
    with pytest.raises(ContractError):
        metrics.average_precision([0.2, 0.7], [0, 0])
    with pytest.raises(ContractError):
        metrics.average_precision([0.2], [0, 1])


# ---------------------------------------------------------------------------
# reports


def test_report_csv_and_jsonl(tmp_path):
    rep = MetricsReport()
    rep.add("run-x", "evaluate", "test", "gen_base", "bacc", 0.75, 3, "detector=finetuned")
    rep.add("run-x", "evaluate", "test", "gen_variant", "ap", 1 / 3, 3)
    rep.write_csv(tmp_path / "m.csv")
    rep.write_jsonl(tmp_path / "m.jsonl")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "run_id,stage,split,generator_tag,metric,value,seed,param"
    back = MetricsReport.read_csv(tmp_path / "m.csv")
    assert back.rows == rep.rows
    rows = [json.loads(l) for l in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert rows == rep.rows


def test_report_rejects_bad_rows():
    rep = MetricsReport()
    with pytest.raises(ContractError):
        rep.add("r", "s", "test", "g", "f1", 0.5, 0)
    with pytest.raises(ContractError):
        rep.add("r", "s", "test", "g", "bacc", float("nan"), 0)


# ---------------------------------------------------------------------------
# robustness sweep


@pytest.fixture(scope="module")
def sweep_data():
    rng = np.random.default_rng(6)
    x = rng.uniform(-1, 1, (200, 16, 16)).astype(np.float32)
    y = np.r_[np.zeros(100, int), np.ones(100, int)]
    x[100:] = np.clip(x[100:] * 0.3 + 0.4, -1, 1)
    return x, y


def test_sweep_rows_and_identity_point(sweep_data):
    x, y = sweep_data
    det = DetectorNet(16, seed=0)
    grid = {"blur": (0.0, 1.0), "jpeg": (95, 65), "resize": (0.75, 1.0, 1.5)}
    rep = metrics.robustness_sweep(det, list(x), y, grid, chunk=64)
    assert len(rep.rows) == 7
    clean = metrics.balanced_accuracy(predict_patched(det, x), y)
    for param in ("blur=0.0", "resize=1.0"):
        assert rep.select(param=param)[0]["value"] == clean


def test_untrained_detector_blur_sweep_is_chance():
    rng = np.random.default_rng(7)
    x = rng.uniform(-1, 1, (400, 16, 16)).astype(np.float32)
    y = rng.permutation(np.r_[np.zeros(200, int), np.ones(200, int)])
    rep = metrics.robustness_sweep(DetectorNet(16, seed=1), list(x), y, {"blur": metrics.DEFAULT_GRID["blur"]})
    assert all(abs(r["value"] - 0.5) <= 0.05 for r in rep.rows)


# ---------------------------------------------------------------------------
# spectra


def test_parseval_per_image():
    rng = np.random.default_rng(8)
    r = rng.standard_normal((5, 16, 16))
    for img in r:
        _, mean, counts = metrics.radial_power_profile(img)
        spatial = np.sum(img**2)
        assert abs(np.sum(mean * counts) - spatial) / spatial < 1e-6


def test_white_noise_profile_is_flat():
    r = np.random.default_rng(9).standard_normal((1000, 16, 16))
    radius, mean, _ = metrics.radial_power_profile(r)
    mid = (radius >= 2) & (radius <= 7)
    assert np.all(np.abs(mean[mid] - 1.0) < 0.1)


def test_profile_is_deterministic_and_rejects_empty():
    r = np.random.default_rng(10).standard_normal((3, 8, 8))
    a = metrics.radial_power_profile(r)[1]
    assert a.tobytes() == metrics.radial_power_profile(r.copy())[1].tobytes()
    with pytest.raises(ContractError):
        metrics.radial_power_profile(np.zeros((0, 8, 8)))


def test_profile_csv(tmp_path):
    metrics.write_profile_csv(tmp_path / "p.csv", [0, 1], [2.5, 0.125])
    assert (tmp_path / "p.csv").read_text().splitlines() == ["radius,energy", "0,2.5", "1,0.125"]
