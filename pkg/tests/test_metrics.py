import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcl.metrics import (
    CSV_HEADER, SEPARABILITY_CAP, RoundMetrics, accuracy, pca_project, read_metrics_csv,
    separability, write_features_csv, write_metrics_csv,
)


def test_accuracy_examples():
    assert accuracy([[2.0, 1.0], [0.0, 3.0]], [0, 1]) == 1.0
    assert accuracy([[2.0, 1.0], [0.0, 3.0]], [1, 1]) == 0.5
    assert accuracy([[1.0, 1.0, 0.0]], [0]) == 1.0  # tie resolved to the lowest class


def test_accuracy_errors():
    with pytest.raises(ValueError):
        accuracy(np.zeros((0, 2)), [])
    with pytest.raises(ValueError):
        accuracy(np.zeros((3, 2)), [0, 1])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 10.0), shift=st.floats(-5.0, 5.0))
def test_accuracy_invariant_under_monotone_transform(seed, scale, shift):
    rng = np.random.default_rng(seed)
    logits, labels = rng.normal(size=(20, 4)), rng.integers(0, 4, size=20)
    assert accuracy(np.exp(scale * logits + shift), labels) == accuracy(logits, labels)


def test_separability_zero_spread_hits_cap():
    feats = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
    assert separability(feats, [0, 0, 1, 1]) == SEPARABILITY_CAP


def test_separability_identical_classes_near_zero():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4000, 2))
    assert separability(x, np.arange(4000) % 2) < 0.1


def test_separability_far_blobs():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(200, 2)), rng.normal(size=(200, 2)) + [10.0, 0.0]
    # mean distance to the class mean of a 2-D unit Gaussian is sqrt(pi/2) ~ 1.25
    ratio = separability(np.vstack([a, b]), [0] * 200 + [1] * 200)
    assert ratio == pytest.approx(10 / math.sqrt(math.pi / 2), rel=0.1)
    assert ratio > 5


def test_separability_single_sample_classes_excluded_from_spread():
    feats = np.array([[0.0, 0.0], [2.0, 0.0], [10.0, 0.0]])
    # class 0 mean (1, 0) with spread 1; class 1 is a single point 9 away
    assert separability(feats, [0, 0, 1]) == pytest.approx(9.0)


def test_separability_needs_two_classes():
    with pytest.raises(ValueError):
        separability(np.zeros((3, 2)), [0, 0, 0])


def test_separability_invariant_under_rigid_motion():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(60, 5)), rng.integers(0, 3, size=60)
    R = np.linalg.qr(rng.normal(size=(5, 5)))[0]
    moved = x @ R.T + rng.normal(size=5) * 7
    assert separability(moved, y) == pytest.approx(separability(x, y), rel=1e-10)


def test_pca_sign_and_identity():
    x = np.array([[-2.0, 0.0], [2.0, 0.0], [0.0, -1.0], [0.0, 1.0]])
    coords = pca_project(x)
    # components are the coordinate axes; largest loading made positive
    np.testing.assert_allclose(coords, x, atol=1e-12)
    # negating the data keeps the components, so the coordinates flip
    np.testing.assert_allclose(pca_project(-x), -x, atol=1e-12)


def test_pca_preserves_distances_in_a_plane():
    rng = np.random.default_rng(4)
    plane = rng.normal(size=(30, 2)) * [3.0, 1.0]
    basis = np.linalg.qr(rng.normal(size=(6, 2)))[0]
    coords = pca_project(plane @ basis.T)
    d_in = np.linalg.norm(plane[:, None] - plane[None], axis=-1)
    d_out = np.linalg.norm(coords[:, None] - coords[None], axis=-1)
    np.testing.assert_allclose(d_out, d_in, atol=1e-9)


def test_pca_explained_variance_on_blobs():
    rng = np.random.default_rng(5)
    centers = rng.normal(size=(3, 10)) * 10
    x = np.vstack([c + rng.normal(size=(100, 10)) for c in centers])
    coords, explained = pca_project(x, return_explained=True)
    assert coords.shape == (300, 2)
    assert explained > 0.8


def test_pca_errors():
    with pytest.raises(ValueError):
        pca_project(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        pca_project(np.ones((5, 3)))


def _series():
    return [RoundMetrics(t, {0: 0.5 + t, 1: 1 / 3}, {0: 1.0, 1: 0.25}, {0: 2.0, 1: 0.125},
                         contrastive_loss=-1.5, separability=math.pi) for t in range(2)]


def test_csv_empty_series_is_header_only(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics_csv([], path)
    assert path.read_text() == ",".join(CSV_HEADER) + "\n"


def test_csv_rows_and_round_trip(tmp_path):
    path = tmp_path / "m.csv"
    series = _series()
    write_metrics_csv(series, path)
    rows = read_metrics_csv(path)
    # 9 significant digits round-trip to within half a unit in the last place
    assert len(rows) == 6  # 2 rounds x (2 clients + aggregate)
    assert [r["client"] for r in rows] == [0, 1, -1, 0, 1, -1]
    assert rows[1]["loss"] == pytest.approx(1 / 3, rel=5e-9)
    assert rows[2]["loss"] == pytest.approx(series[0].mean_loss, rel=5e-9)
    assert rows[5]["acc"] == 0.625
    assert rows[0]["separability"] == pytest.approx(math.pi, rel=5e-9)
    assert b"\r" not in path.read_bytes()


def test_csv_nan_and_bad_path(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics_csv([RoundMetrics(0, {0: 1.0}, {0: 1.0}, {0: 0.0})], path)
    assert math.isnan(read_metrics_csv(path)[0]["contrastive_loss"])
    with pytest.raises(OSError, match="could not write"):
        write_metrics_csv([], tmp_path / "missing" / "m.csv")


def test_features_csv(tmp_path):
    path = tmp_path / "f.csv"
    write_features_csv([(3, np.array([[0.5, -1.0]]), np.array([2]))], path)
    assert path.read_text().splitlines() == ["client,label,f0,f1", "3,2,0.5,-1"]
