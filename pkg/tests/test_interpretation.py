import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pscnn.classification import PartStackedClassifier
from pscnn.errors import CoverageError, DimensionError, PartUnavailableError
from pscnn.evaluation import accuracy
from pscnn.geometry import desk_geometry, receptive_field
from pscnn.interpretation import (
    EmbeddingIndex,
    Interpreter,
    ManualEntry,
    build_index,
    build_tables,
    class_recall,
    confidence_table,
    embed,
    embed_batch,
    most_confused,
    nearest_neighbors,
    pairwise_accuracy,
    part_gain,
    render_manual,
)
from pscnn.training import TrainConfig


def _true_grid_locations(data, geom):
    """Grid cell nearest each visible keypoint; -1 for occluded parts."""
    _, stride, offset = receptive_field(geom)
    side = geom.output_side
    xy = np.clip(np.round((data.keypoints[..., :2] - offset) / stride), 0, side - 1).astype(np.int64)
    locs = xy[..., ::-1].copy()
    locs[data.keypoints[..., 2] == 0] = -1
    return locs


@pytest.fixture(scope="module")
def true_locs(small):
    return tuple(_true_grid_locations(d, desk_geometry()) for d in small)


@pytest.fixture(scope="module")
def tables(small, small_fcn, true_locs):
    train, test = small
    cfg = TrainConfig(lr=0.01, epochs=1, batch_size=8, rank_epochs=1)
    return build_tables(train, test, small_fcn, cfg, true_locs)


@pytest.fixture(scope="module")
def interp(small, true_locs, tables):
    config = tables.results["bbox_part1"].model.config
    full = PartStackedClassifier(config, (1, 2, 3, 4, 5), seed=0)
    return Interpreter(full, small[0], true_locs[0], tables)


def _scores_from_predictions(pred, num_classes):
    s = np.zeros((len(pred), num_classes))
    s[np.arange(len(pred)), pred] = 1.0
    return s


# -- embeddings and retrieval ------------------------------------------------


def test_embeddings_are_unit_norm(small, interp):
    vecs = embed_batch(small[1].images, interp.model)
    np.testing.assert_allclose(np.linalg.norm(vecs, axis=1), 1.0, rtol=1e-12)
    a = embed(small[1].images[0], interp.model)
    assert np.linalg.norm(a - vecs[0]) < 1e-6


def test_identical_images_are_at_distance_zero(small, interp):
    index = build_index(small[0], interp.model)
    sid = small[0].ids[3]
    (top, d), *_ = index.query(embed(small[0].images[3], interp.model), 2)
    assert top == sid and d < 1e-6


def test_missing_part_is_unavailable(small, interp):
    locs = np.full((5, 2), -1)
    with pytest.raises(PartUnavailableError):
        embed(small[0].images[0], interp.model, locs, part=2)
    with pytest.raises(PartUnavailableError):
        embed(small[0].images[0], interp.model, None, part=2)


def test_part_embedding_rows_missing_are_nan(small, interp):
    locs = np.full((3, 5, 2), 6)
    locs[0, 1] = -1
    vecs = embed_batch(small[0].images[:3], interp.model, locs, part=2)
    assert np.isnan(vecs[0]).all() and np.isfinite(vecs[1:]).all()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), k=st.integers(1, 10))
def test_nearest_neighbors_match_brute_force(seed, k):
    rng = np.random.default_rng(seed)
    refs = rng.normal(size=(100, 6)).round(1)
    q = rng.normal(size=6).round(1)
    idx, dist = nearest_neighbors(q, refs, k)
    brute = sorted(range(100), key=lambda i: (float(np.sqrt(((refs[i] - q) ** 2).sum())), i))[:k]
    assert idx.tolist() == brute
    np.testing.assert_allclose(dist, np.linalg.norm(refs[brute] - q, axis=1))


def test_nearest_neighbors_skip_nan_rows():
    refs = np.array([[np.nan, np.nan], [1.0, 0.0], [0.0, 0.0]])
    idx, _ = nearest_neighbors(np.zeros(2), refs, 5)
    assert idx.tolist() == [2, 1]
    with pytest.raises(DimensionError):
        nearest_neighbors(np.zeros(3), refs, 1)


def test_index_save_load(tmp_path, small, interp):
    index = build_index(small[0], interp.model)
    index.save(tmp_path)
    back = EmbeddingIndex.load(tmp_path)
    assert back.ids == index.ids
    np.testing.assert_array_equal(back.labels, index.labels)
    np.testing.assert_allclose(back.vectors, index.vectors, rtol=1e-6)
    with pytest.raises(DimensionError):
        EmbeddingIndex(index.vectors, index.ids[:-1], index.labels)


# -- gain and confidence tables ---------------------------------------------------


def test_part_gain_constructed_case():
    labels = np.array([0, 0, 1, 1, 2, 2])
    bbox = _scores_from_predictions(np.array([0, 1, 1, 0, 2, 2]), 3)
    part1 = _scores_from_predictions(np.array([0, 0, 1, 1, 2, 2]), 3)
    part2 = _scores_from_predictions(np.array([1, 1, 1, 0, 2, 2]), 3)
    t = part_gain(labels, bbox, {1: part1, 2: part2}, 3, top_k=1)
    np.testing.assert_allclose(t.one_vs_all[:, 0], [0.5, 0.5, 0.0])
    np.testing.assert_allclose(t.one_vs_all[:, 1], [-0.5, 0.0, 0.0])
    assert t.confused == [[1], [0], [0]]
    assert t.ranked_parts(0) == [1, 2]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_gain_weighted_by_class_size_is_accuracy_delta(seed):
    rng = np.random.default_rng(seed)
    c, n = 4, 40
    labels = np.concatenate([np.arange(c), rng.integers(0, c, n - c)])
    bbox, part = rng.random((n, c)), rng.random((n, c))
    t = part_gain(labels, bbox, {3: part}, c)
    counts = np.bincount(labels, minlength=c)
    delta = accuracy(part.argmax(1), labels) - accuracy(bbox.argmax(1), labels)
    assert (counts * t.one_vs_all[:, 2]).sum() / n == pytest.approx(delta)
    assert (t.one_vs_all[:, :2] == 0).all()


def test_one_vs_most_restricts_the_argmax():
    scores = np.array([[0.5, 0.1, 0.9]])
    assert class_recall(scores, [0], 0) == 0.0
    assert class_recall(scores, [0], 0, pool=[1]) == 1.0


def test_missing_class_raises_coverage_error():
    labels = np.array([0, 0, 1])
    s = np.zeros((3, 3))
    with pytest.raises(CoverageError, match="class 2"):
        part_gain(labels, s, {1: s}, 3)
    with pytest.raises(CoverageError):
        pairwise_accuracy(s, labels, 2, 2)


def test_confidence_table_properties():
    rng = np.random.default_rng(1)
    labels = np.repeat(np.arange(3), 5)
    conf = confidence_table(labels, {1: rng.random((15, 3))}, 3)[1]
    np.testing.assert_array_equal(np.diag(conf), 1.0)
    np.testing.assert_array_equal(conf, conf.T)
    assert ((conf >= 0) & (conf <= 1)).all()


def test_most_confused_counts_both_directions():
    cm = np.array([[5, 1, 0, 2], [3, 5, 0, 0], [0, 0, 5, 0], [0, 0, 0, 5]])
    assert most_confused(cm, 0, 2) == [1, 3]
    assert most_confused(cm, 2, 2) == [0, 1]


def test_built_tables_cover_every_part(tables):
    assert tables.gain.parts == (1, 2, 3, 4, 5)
    assert sorted(tables.confidence) == [1, 2, 3, 4, 5]
    assert set(tables.results) == {"bbox"} | {f"bbox_part{p}" for p in range(1, 6)} | {f"part{p}" for p in range(1, 6)}
    json.dumps(tables.gain.to_dict())


# -- manual ---------------------------------------------------------------------------


def test_manual_without_comparisons(small, true_locs, interp):
    entry, html_text, _ = render_manual(small[1].images[0], true_locs[1][0], interp, K=0, T=2)
    assert entry.comparisons == []
    assert len(entry.exemplars) == 2
    labels = dict(zip(small[0].ids, small[0].labels))
    assert all(labels[i] == entry.predicted for i, _ in entry.exemplars)
    assert "<table>" not in html_text


def test_manual_structure_and_rerun(tmp_path, small, true_locs, interp):
    img, locs = small[1].images[1], true_locs[1][1]
    labels = dict(zip(small[0].ids, small[0].labels))
    ref_locs = dict(zip(small[0].ids, true_locs[0]))
    before = {k: v.copy() for k, v in interp.model.state_dict().items()}
    entry, html_a, json_a = render_manual(img, locs, interp, K=2, R=2, T=3, sample_id="s1", out_dir=tmp_path)
    _, html_b, json_b = render_manual(img, locs, interp, K=2, R=2, T=3, sample_id="s1")
    assert (html_a, json_a) == (html_b, json_b)
    assert (tmp_path / "manual_s1.html").read_text() == html_a
    assert len(entry.comparisons) == 2
    for comp in entry.comparisons:
        assert comp["class"] != entry.predicted
        assert len(comp["parts"]) == 2
        for p in comp["parts"]:
            assert 0 <= p["confidence"] <= 1
            if locs[p["part"] - 1, 0] >= 0:
                for cls in (entry.predicted, comp["class"]):
                    ids = p["patches"][str(cls)]
                    assert 1 <= len(ids) <= 3
                    assert all(labels[i] == cls and ref_locs[i][p["part"] - 1, 0] >= 0 for i in ids)
    for k, v in interp.model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_manual_entry_rejects_bad_confidence():
    with pytest.raises(ValueError):
        ManualEntry("x", 0, [], [{"class": 1, "parts": [{"part": 1, "gain": 0.0, "confidence": 1.5, "patches": {}}]}])
