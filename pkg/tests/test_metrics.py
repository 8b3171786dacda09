import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cgvqa import metrics
from cgvqa.manifest import DatasetManifest, EncodedVariant, GameTitle, SourceSequence, SplitSpec
from cgvqa.metrics import MetricError, PredictionSet


# Independent definitions: plain Python loops, no numpy reductions.
def brute_pcc(x, y):
    n = len(x)
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def brute_ranks(x):
    # average rank over ties, 1-based
    order = sorted(range(len(x)), key=lambda i: x[i])
    ranks = [0.0] * len(x)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and x[order[j + 1]] == x[order[i]]:
            j += 1
        for t in range(i, j + 1):
            ranks[order[t]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def brute_srcc(x, y):
    return brute_pcc(brute_ranks(x), brute_ranks(y))


def brute_rmse(p, l):
    return math.sqrt(math.fsum((a - b) ** 2 for a, b in zip(p, l)) / len(p))


def brute_r2(p, l):
    m = math.fsum(l) / len(l)
    return 1 - math.fsum((b - a) ** 2 for a, b in zip(p, l)) / math.fsum((b - m) ** 2 for b in l)


def random_pairs(count=200, seed=0):
    rng = np.random.default_rng(seed)
    for t in range(count):
        n = int(rng.integers(2, 501))
        if t % 2:  # ties: draw from a small integer alphabet
            x = rng.integers(0, 6, n).astype(float)
            y = x * 3 + rng.integers(0, 4, n)
        else:
            x = rng.uniform(0, 100, n)
            y = 0.7 * x + rng.normal(0, 10, n)
        if np.all(x == x[0]) or np.all(y == y[0]):
            x[0], y[0] = x[0] + 1, y[0] + 1
        yield x, y


def test_metric_oracles_on_200_random_vectors():
    for x, y in random_pairs():
        xl, yl = x.tolist(), y.tolist()
        assert metrics.pcc(x, y) == pytest.approx(brute_pcc(xl, yl), abs=1e-9)
        assert metrics.srcc(x, y) == pytest.approx(brute_srcc(xl, yl), abs=1e-9)
        assert metrics.rmse(x, y) == pytest.approx(brute_rmse(xl, yl), abs=1e-9)
        assert metrics.r2(x, y) == pytest.approx(brute_r2(xl, yl), abs=1e-9)


@pytest.mark.parametrize("fn", [metrics.pcc, metrics.srcc])
def test_zero_variance_raises(fn):
    with pytest.raises(MetricError):
        fn([3.0, 3.0, 3.0], [1.0, 2.0, 3.0])
    with pytest.raises(MetricError):
        fn([1.0, 2.0, 3.0], [5.0, 5.0, 5.0])


def test_r2_constant_labels_raise():
    with pytest.raises(MetricError):
        metrics.r2([1.0, 2.0], [4.0, 4.0])


@pytest.mark.parametrize("fn", [metrics.rmse, metrics.pcc, metrics.srcc, metrics.r2])
def test_length_mismatch_and_empty(fn):
    with pytest.raises(ValueError):
        fn([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        fn([], [])


def test_examples():
    assert metrics.rmse([1, 2, 3], [1, 2, 3]) == 0.0
    assert metrics.pcc([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert metrics.srcc([1, 2, 3], [1, 8, 27]) == pytest.approx(1.0)
    assert metrics.pcc([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert metrics.rmse([11, 12, 13], [1, 2, 3]) == pytest.approx(10.0)


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@given(st.lists(st.tuples(finite, finite), min_size=3, max_size=60))
def test_correlation_bounds_and_symmetry(pairs):
    x = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    for fn in (metrics.pcc, metrics.srcc):
        try:
            v = fn(x, y)
        except MetricError:
            continue
        assert -1.0 <= v <= 1.0
        assert fn(y, x) == pytest.approx(v, abs=1e-9)


@given(st.lists(finite, min_size=3, max_size=60), st.floats(0.1, 10), st.floats(-50, 50))
def test_affine_invariance(xs, a, b):
    x = np.array(xs)
    y = np.arange(len(xs), dtype=float)
    try:
        ref = metrics.pcc(x, y)
    except MetricError:
        return
    if np.ptp(a * x + b) < 1e-6 * max(1.0, np.abs(x).max()):
        return
    assert metrics.pcc(a * x + b, y) == pytest.approx(ref, abs=1e-6)


@given(st.lists(finite, min_size=1, max_size=60), st.lists(finite, min_size=1, max_size=60))
def test_rmse_nonnegative_and_zero_on_identity(xs, ys):
    n = min(len(xs), len(ys))
    assert metrics.rmse(xs[:n], ys[:n]) >= 0.0
    assert metrics.rmse(xs, xs) == 0.0


# -- pooling ---------------------------------------------------------------------


def test_pool_to_video_matches_brute_force_means():
    rng = np.random.default_rng(3)
    for _ in range(30):
        n_var = int(rng.integers(1, 8))
        keys, pred, lab = [], [], []
        for v in range(n_var):
            for i in rng.choice(100, int(rng.integers(1, 20)), replace=False):
                keys.append((f"v{v}", int(i)))
                pred.append(float(rng.uniform(0, 100)))
                lab.append(float(rng.uniform(0, 100)))
        perm = rng.permutation(len(keys))
        frames = PredictionSet.from_arrays([keys[i] for i in perm], np.array(pred)[perm], np.array(lab)[perm])
        video = metrics.pool_to_video(frames)
        assert video.level == "video"
        got = {e.variant_id: (e.predicted, e.label) for e in video.entries}
        assert sorted(got) == sorted({k[0] for k in keys})
        for vid, (p, l) in got.items():
            idx = [j for j, k in enumerate(keys) if k[0] == vid]
            assert p == pytest.approx(sum(pred[j] for j in idx) / len(idx), abs=1e-9)
            assert l == pytest.approx(sum(lab[j] for j in idx) / len(idx), abs=1e-9)


def test_pool_singleton_is_identity():
    frames = PredictionSet.from_arrays([("a", 7)], [42.5], [40.0])
    (e,) = metrics.pool_to_video(frames).entries
    assert (e.variant_id, e.predicted, e.label) == ("a", 42.5, 40.0)


def test_duplicate_keys_rejected():
    with pytest.raises(ValueError):
        PredictionSet.from_arrays([("a", 1), ("a", 1)], [1.0, 2.0], [1.0, 2.0])


# -- reports ---------------------------------------------------------------------


def _toy_manifest():
    games = (GameTitle("g0", "G0"), GameTitle("g1", "G1"))
    seqs = (
        SourceSequence("g0__a", "g0", 4, (640, 360), 30.0),
        SourceSequence("g0__b", "g0", 4, (640, 360), 30.0),
        SourceSequence("g1__a", "g1", 4, (640, 360), 30.0),
    )
    variants = tuple(
        EncodedVariant(f"{s.id}__v{j}", s.id, "H264", 500.0 * (j + 1), (640, 360), f"{s.id}/v{j}.mp4", 4)
        for s in seqs for j in range(2)
    )
    split = SplitSpec(frozenset({"g0__a"}), frozenset({"g0__b", "g1__a"}), frozenset({"g0"}))
    return DatasetManifest(games, seqs, variants, split)


def test_evaluate_and_seen_breakdown():
    m = _toy_manifest()
    rng = np.random.default_rng(0)
    keys = [(v.id, i) for v in m.side_variants("validation") for i in range(4)]
    lab = rng.uniform(20, 90, len(keys))
    preds = PredictionSet.from_arrays(keys, lab + rng.normal(0, 3, len(keys)), lab)
    rep = metrics.evaluate(preds)
    assert rep.n == len(keys) and rep.level == "frame" and rep.group == "all"
    assert rep.pcc_squared == pytest.approx(rep.pcc ** 2)
    seen, unseen = metrics.breakdown_by_seen(preds, m)
    assert seen.n == 8 and unseen.n == 8
    assert {e.variant_id.split("__")[0] for e in preds.subset({k[0] for k in keys if k[0].startswith("g0")}).entries} == {"g0"}
    assert seen.group == "seen_games" and unseen.group == "unseen_games"


def test_evaluate_marks_undefined_correlations():
    preds = PredictionSet.from_arrays([("a", 0), ("a", 1), ("a", 2)], [5.0, 5.0, 5.0], [1.0, 2.0, 3.0])
    rep = metrics.evaluate(preds)
    assert rep.pcc is None and rep.srcc is None and "pcc" in rep.undefined
    assert rep.rmse == pytest.approx(math.sqrt((16 + 9 + 4) / 3))


def test_breakdown_empty_group_named():
    m = _toy_manifest()
    preds = PredictionSet.from_arrays([("g1__a__v0", 0), ("g1__a__v0", 1)], [1.0, 2.0], [1.0, 3.0])
    with pytest.raises(ValueError, match="seen"):
        metrics.breakdown_by_seen(preds, m)


def test_table_csv_header(tmp_path):
    preds = PredictionSet.from_arrays([("a", 0), ("a", 1), ("b", 0)], [1.0, 2.0, 4.0], [1.5, 2.0, 3.0])
    metrics.write_table1_csv([("Xception", metrics.evaluate(preds)), ("ResNet50", None)], tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "architecture,level,r2,rmse,pcc,srcc,status"
    assert lines[1].startswith("Xception,frame,") and lines[1].endswith(",ok")
    assert lines[2].startswith("ResNet50,") and lines[2].endswith("failed")
