import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image
from scipy import stats

from helpers import lloyd_ref, recall_ref
from maskvl.data import SHAPES, generate_synthetic
from maskvl.probe import (
    AlignmentMap,
    alignment_grid,
    cluster_patches,
    cosine,
    kmeans,
    kmeans_plus_plus,
    lloyd,
    read_tsv_grid,
    recall_at_k,
    similarity_histogram,
    top_similarity_distribution,
    word_patch_alignment,
    write_cluster_map,
    write_heatmap,
)

# -- recall@K --------------------------------------------------------------------


def test_truth_on_top_gives_full_recall(rng):
    scores = rng.random((6, 6)) + 10 * np.eye(6)
    assert recall_at_k(scores, range(6)).recall_at[1] == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_recall_matches_sort_oracle(seed):
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal((10, 10))
    truth = rng.integers(0, 10, 10)
    res = recall_at_k(scores, truth, ks=(1, 3, 5, 10))
    for k in (1, 3, 5, 10):
        assert res.recall_at[k] == recall_ref(scores, truth, k)


def test_ties_break_by_ascending_id():
    scores = np.zeros((1, 5))
    res = recall_at_k(scores, [3], ks=(1, 3, 4))
    assert res.ranked[0].tolist() == [0, 1, 2, 3, 4]
    assert res.recall_at == {1: 0.0, 3: 0.0, 4: 1.0}
    assert recall_ref(scores, [3], 4) == 1.0


def test_random_scores_expected_recall_at_one():
    rng = np.random.default_rng(99)
    n, trials = 100, 10_000
    scores = rng.random((trials, n))
    res = recall_at_k(scores, rng.integers(0, n, trials), ks=(1,))
    p = 1 / n
    assert abs(res.recall_at[1] - p) < 3 * math.sqrt(p * (1 - p) / trials)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 7), elements=st.floats(-5, 5)), st.lists(st.integers(0, 6), min_size=5, max_size=5))
def test_recall_monotone_and_bounded(scores, truth):
    r = recall_at_k(scores, truth, ks=range(1, 8)).recall_at
    values = [r[k] for k in range(1, 8)]
    assert values == sorted(values)
    assert all(0.0 <= v <= 1.0 for v in values) and values[-1] == 1.0


def test_missing_truth_raises():
    with pytest.raises(KeyError):
        recall_at_k(np.zeros((1, 3)), ["z"], candidate_ids=["a", "b", "c"])


def test_string_candidate_ids():
    res = recall_at_k(np.array([[0.1, 0.9, 0.5]]), ["c"], ks=(1, 2), candidate_ids=["a", "b", "c"])
    assert res.ranked[0].tolist() == ["b", "c", "a"]
    assert res.recall_at == {1: 0.0, 2: 1.0}


# -- cosine and alignment ------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-1e3, 1e3)), arrays(np.float64, (4, 6), elements=st.floats(-1e3, 1e3)))
def test_cosine_bounded(a, b):
    c = cosine(a, b)
    assert np.all(np.abs(c) <= 1.0 + 1e-6)


def test_cosine_self_is_one(rng):
    x = rng.standard_normal((5, 8))
    np.testing.assert_allclose(cosine(x, x), 1.0, atol=1e-12)


def test_orthogonal_word_gives_zero_map():
    patches = np.zeros((16, 8))
    patches[:, :4] = np.random.default_rng(0).standard_normal((16, 4))
    word = np.zeros(8)
    word[6] = 1.0
    np.testing.assert_array_equal(alignment_grid(word, patches, (4, 4)), 0.0)


def test_alignment_map_shape_and_finite(tiny_model, vocab):
    rec = generate_synthetic(1, seed=5, image_size=16)[0]
    amap = word_patch_alignment(tiny_model, vocab, rec.image, rec.caption, 2)
    assert amap.grid.shape == tiny_model.cfg.grid
    assert np.isfinite(amap.grid).all()
    assert amap.normalization["similarity"] == "cosine"
    assert amap.word == rec.caption.split()[1]


@pytest.mark.parametrize("mode", ["centered-cosine", "attention"])
def test_alternative_similarities(tiny_model, vocab, mode):
    rec = generate_synthetic(1, seed=5, image_size=16)[0]
    amap = word_patch_alignment(tiny_model, vocab, rec.image, rec.caption, 2, similarity=mode)
    assert amap.grid.shape == (2, 2) and amap.normalization["similarity"] == mode
    if mode == "attention":
        assert 0.0 <= amap.grid.sum() <= 1.0 + 1e-6


@pytest.mark.parametrize("index", [0, 14, 99, -1])
def test_alignment_index_errors(tiny_model, vocab, index):
    rec = generate_synthetic(1, seed=5, image_size=16)[0]
    with pytest.raises(IndexError):
        word_patch_alignment(tiny_model, vocab, rec.image, "a red square", index)


def test_probe_is_deterministic(tiny_model, vocab):
    rec = generate_synthetic(1, seed=5, image_size=16)[0]
    a = word_patch_alignment(tiny_model, vocab, rec.image, rec.caption, 2).grid
    b = word_patch_alignment(tiny_model, vocab, rec.image, rec.caption, 2).grid
    assert a.tobytes() == b.tobytes()


def test_heatmap_files_round_trip_bit_exact(tmp_path, rng):
    grid = rng.standard_normal((4, 4)) / 3
    amap = AlignmentMap("red", grid)
    paths = write_heatmap(amap, tmp_path / "maps" / "red", image=rng.random((32, 32, 3)))
    assert read_tsv_grid(paths["tsv"]).tobytes() == grid.tobytes()
    gray = np.asarray(Image.open(paths["pgm"]))
    assert gray.shape == (32, 32) and gray.min() == 0 and gray.max() == 255
    assert np.asarray(Image.open(paths["png"])).shape == (32, 32, 3)
    assert "# similarity=cosine" in paths["tsv"].read_text()


def test_constant_heatmap_does_not_divide_by_zero(tmp_path):
    paths = write_heatmap(AlignmentMap("x", np.full((2, 2), 0.3)), tmp_path / "flat")
    assert np.asarray(Image.open(paths["pgm"])).max() == 0


# -- noun similarity distribution ----------------------------------------------


def test_empty_dataset_gives_empty_table(tiny_model, vocab):
    rows = top_similarity_distribution(tiny_model, vocab, [], ["square"])
    assert rows == [] and similarity_histogram(rows) == []


def test_duplicate_image_identical_values(tiny_model, vocab):
    rec = generate_synthetic(1, seed=2, image_size=16)[0]
    rows = top_similarity_distribution(tiny_model, vocab, [rec, rec], ["square", "red"])
    assert rows[0] == rows[2] and rows[1] == rows[3]


def test_oov_noun_warns(tiny_model, vocab, caplog):
    rec = generate_synthetic(1, seed=2, image_size=16)[0]
    rows = top_similarity_distribution(tiny_model, vocab, [rec], ["giraffe"])
    assert len(rows) == 1 and "out of vocabulary" in caplog.text


def test_histogram_counts_everything(tiny_model, vocab):
    recs = generate_synthetic(10, seed=2, image_size=16)
    rows = top_similarity_distribution(tiny_model, vocab, recs, ["square", "circle"])
    table = similarity_histogram(rows, bins=10)
    assert len(table) == 20
    assert sum(r[3] for r in table if r[0] == "square") == 10


def test_in_vocab_and_held_out_queries_differ_in_mean(tiny_model, vocab):
    recs = generate_synthetic(40, seed=21, image_size=16)
    inside = [r[2] for r in top_similarity_distribution(tiny_model, vocab, recs, list(SHAPES))]
    outside = [r[2] for r in top_similarity_distribution(tiny_model, vocab, recs, ["dog", "car", "tree"])]
    assert stats.ttest_ind(inside, outside, equal_var=False).pvalue < 0.01


# -- k-means ---------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(6))
def test_lloyd_matches_oracle_on_sixteen_points(seed):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.standard_normal((8, 5)), rng.standard_normal((8, 5)) + 3])
    init = kmeans_plus_plus(x, 3, np.random.default_rng(seed))
    res = lloyd(x, init)
    labels, centers = lloyd_ref(x, init)
    assert res.labels.tolist() == labels.tolist()
    np.testing.assert_allclose(res.centers, centers, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_inertia_never_increases(seed):
    x = np.random.default_rng(seed).standard_normal((40, 3))
    hist = kmeans(x, 5, seed).inertia_history
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))


def test_k_one_single_cluster(rng):
    x = rng.standard_normal((16, 4))
    res = kmeans(x, 1)
    assert set(res.labels.tolist()) == {0}
    np.testing.assert_allclose(res.centers[0], x.mean(axis=0), atol=1e-12)


def test_k_equals_n_distinct_points(rng):
    x = rng.standard_normal((16, 4))
    res = kmeans(x, 16, seed=3)
    assert sorted(res.labels.tolist()) == list(range(16))
    assert res.inertia_history[-1] == 0.0


@pytest.mark.parametrize("k", [0, 17])
def test_bad_k_raises(rng, k):
    with pytest.raises(ValueError):
        kmeans(rng.standard_normal((16, 4)), k)


def test_kmeans_plus_plus_picks_data_points(rng):
    x = rng.standard_normal((20, 3))
    centers = kmeans_plus_plus(x, 4, np.random.default_rng(1))
    for c in centers:
        assert any(np.array_equal(c, p) for p in x)
    assert len({c.tobytes() for c in centers}) == 4


def test_cluster_patches_grid_and_file(tiny_model, vocab, tmp_path):
    rec = generate_synthetic(1, seed=1, image_size=16)[0]
    labels = cluster_patches(tiny_model, rec.image, k=2, seed=0)
    assert labels.shape == (2, 2) and set(labels.ravel()) <= {0, 1}
    again = cluster_patches(tiny_model, rec.image, k=2, seed=0)
    assert labels.tolist() == again.tolist()
    path = write_cluster_map(labels, tmp_path / "c.png")
    assert np.asarray(Image.open(path)).shape == (16, 16, 3)


def test_cluster_k_one_and_n(tiny_model):
    rec = generate_synthetic(1, seed=1, image_size=16)[0]
    assert set(cluster_patches(tiny_model, rec.image, 1).ravel()) == {0}
    assert sorted(cluster_patches(tiny_model, rec.image, 4).ravel()) == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        cluster_patches(tiny_model, rec.image, 5)
