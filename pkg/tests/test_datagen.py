import json

import numpy as np
import pytest

from tdcm.datagen import (
    DomainSpec,
    ParseError,
    batch_iterator,
    gen_source,
    load_pair,
    load_tabular,
    make_pair,
    mean_pairwise_distance,
    perturb_to_target,
    save_pair,
    save_tabular,
)


def test_shapes_and_balance():
    dom = gen_source(DomainSpec(K=3, dim=4, n_per_cluster=7, seed=1))
    assert dom.X.shape == (21, 4)
    assert dom.labels.shape == (21,)
    np.testing.assert_array_equal(np.bincount(dom.labels), [7, 7, 7])
    assert dom.centers.shape == (3, 4) and dom.covariances.shape == (3, 4, 4)
    assert np.all(np.abs(dom.centers) <= 5.0)


def test_covariances_positive_definite():
    dom = gen_source(DomainSpec(K=4, dim=6, n_per_cluster=2, seed=3))
    for cov in dom.covariances:
        np.testing.assert_array_equal(cov, cov.T)
        assert np.linalg.eigvalsh(cov).min() >= 0.05 - 1e-12


def test_generation_is_deterministic():
    spec = DomainSpec(K=2, dim=3, n_per_cluster=10, seed=5)
    a, b = make_pair(spec), make_pair(spec)
    assert a.source.X.tobytes() == b.source.X.tobytes()
    assert a.target.X.tobytes() == b.target.X.tobytes()
    assert not np.array_equal(gen_source(DomainSpec(K=2, dim=3, n_per_cluster=10, seed=6)).X, a.source.X)


@pytest.mark.parametrize("kw", [{"K": 1}, {"n_per_cluster": 0}, {"cov_scale": 0.0}])
def test_invalid_spec(kw):
    with pytest.raises(ValueError):
        DomainSpec(**kw)


def test_sample_mean_near_center_small_covariance():
    n = 10_000
    dom = gen_source(DomainSpec(K=2, dim=3, n_per_cluster=n, cov_scale=1e-9, seed=2))
    bound = 3 * np.sqrt(0.05 / n)
    for j in range(2):
        mean = dom.X[dom.labels == j].mean(axis=0)
        assert np.all(np.abs(mean - dom.centers[j]) <= bound)


def test_zero_perturbation_keeps_centers():
    pair = make_pair(DomainSpec(K=3, dim=4, n_per_cluster=5, seed=0), perturbation_scale=0.0)
    np.testing.assert_array_equal(pair.source.centers, pair.target.centers)
    np.testing.assert_array_equal(pair.source.covariances, pair.target.covariances)
    assert not np.array_equal(pair.source.X, pair.target.X)  # fresh samples


def test_target_histogram_matches_source():
    pair = make_pair(DomainSpec(K=5, dim=2, n_per_cluster=9, seed=4))
    np.testing.assert_array_equal(np.bincount(pair.source.labels), np.bincount(pair.target.labels))


def test_negative_perturbation_rejected():
    with pytest.raises(ValueError):
        perturb_to_target(gen_source(DomainSpec(n_per_cluster=2, dim=2)), -0.1, 0)


def test_displacement_matches_scale_monte_carlo():
    scale = 0.5
    ratios = []
    for seed in range(50):
        src = gen_source(DomainSpec(K=3, dim=8, n_per_cluster=1, seed=seed))
        tgt = perturb_to_target(src, scale, seed + 1000)
        ratios.append(np.abs(tgt.centers - src.centers).mean() / mean_pairwise_distance(src.centers))
    expected = scale * np.sqrt(2 / np.pi)  # E|N(0,1)|
    assert abs(np.mean(ratios) - expected) <= 0.2 * expected


def test_tabular_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.normal(scale=1e3, size=(6, 3))
    y = rng.integers(0, 3, size=6)
    save_tabular(tmp_path / "d.csv", X, y)
    X2, y2 = load_tabular(tmp_path / "d.csv")
    assert np.max(np.abs(X2 - X)) <= 1e-12
    np.testing.assert_array_equal(y2, y)


def test_load_small_file(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("f0,f1,label\n1,2,0\n3,4,1\n5.5,-6,1\n")
    X, y = load_tabular(p)
    np.testing.assert_array_equal(X, [[1, 2], [3, 4], [5.5, -6]])
    np.testing.assert_array_equal(y, [0, 1, 1])


def test_load_without_labels(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("f0,f1\n1,2\n3,4\n")
    X, y = load_tabular(p, has_labels=False)
    assert X.shape == (2, 2) and y is None


@pytest.mark.parametrize("text,line", [
    ("f0,f1,label\n1,2,0\n3,0\n", 3),
    ("f0,f1,label\n1,x,0\n", 2),
    ("a,b\n1,2\n", 1),
])
def test_parse_errors_name_line(tmp_path, text, line):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(ParseError, match=f"line {line}"):
        load_tabular(p, has_labels=text.startswith("f0,f1,label"))


def test_pair_round_trip(tmp_path):
    pair = make_pair(DomainSpec(K=2, dim=3, n_per_cluster=4, seed=9), perturbation_scale=0.25)
    files = save_pair(pair, tmp_path / "p")
    assert len(files) == 4
    back = load_pair(tmp_path / "p")
    np.testing.assert_array_equal(back.source.X, pair.source.X)
    np.testing.assert_array_equal(back.target.labels, pair.target.labels)
    np.testing.assert_array_equal(back.target.centers, pair.target.centers)
    assert back.perturbation_scale == 0.25
    meta = json.loads((tmp_path / "p" / "source.json").read_text())
    assert meta["spec"]["seed"] == 9


def test_load_pair_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_pair(tmp_path)


def test_batches():
    batches = batch_iterator(10, 4)
    assert [len(b) for b in batches] == [4, 4, 2]
    a = batch_iterator(np.zeros((10, 2)), 3, shuffle_seed=1)
    b = batch_iterator(10, 3, shuffle_seed=1)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    np.testing.assert_array_equal(np.sort(np.concatenate(a)), np.arange(10))
    with pytest.raises(ValueError):
        batch_iterator(3, 0)
