import numpy as np
import pytest

from calidet.core.edge import (
    DeltaEdge,
    EdgeMatrix,
    LabelSet,
    alignment,
    clip_edge,
    delta,
    edge_from_label_sets,
    edge_mae,
    flat_prior,
    flip_edge,
)
from calidet.core.errors import EdgeValidationError


def brute_force_edge(k, samples):
    values = np.empty((k, k))
    for j in range(k):
        with_j = [s for s in samples if j in s]
        for i in range(k):
            if i == j:
                values[i, j] = 1.0
            elif not with_j:
                values[i, j] = 0.5
            else:
                values[i, j] = sum(1 for s in with_j if i in s) / len(with_j)
    return values


def random_samples(rng, k, n):
    return [set(np.flatnonzero(rng.random(k) < rng.uniform(0.1, 0.7)).tolist()) for _ in range(n)]


def test_flat_prior():
    """
    E0 has ones on the diagonal and 0.5 everywhere else; k=0 is rejected.
    """
    assert (flat_prior(1).values == np.array([[1.0]])).all()
    assert (flat_prior(2).values == np.array([[1.0, 0.5], [0.5, 1.0]])).all()
    e0 = flat_prior(3)
    assert (np.diag(e0.values) == 1).all()
    assert (e0.values[~np.eye(3, dtype=bool)] == 0.5).all()
    with pytest.raises(EdgeValidationError):
        flat_prior(0)


def test_single_sample_edge():
    """
    One sample with classes {0, 2}: both columns of present classes say 0 and 2
    always co-occur and 1 never does; the absent class's column stays flat.
    """
    e_x = edge_from_label_sets(3, [{0, 2}])
    assert e_x.column(0).tolist() == [1.0, 0.0, 1.0]
    assert e_x.column(1).tolist() == [0.5, 1.0, 0.5]
    assert e_x.column(2).tolist() == [1.0, 0.0, 1.0]


def test_batch_edge():
    """
    Three samples {0,2}, {1,2}, {0,1,2}: conditional frequencies per column.
    """
    e_b = edge_from_label_sets(3, [{0, 2}, {1, 2}, {0, 1, 2}])
    v = e_b.values
    assert v[1, 0] == 0.5 and v[2, 0] == 1.0
    assert v[0, 1] == 0.5 and v[2, 1] == 1.0
    assert v[0, 2] == 2 / 3 and v[1, 2] == 2 / 3
    assert (np.diag(v) == 1).all()


def test_empty_sample_is_flat():
    assert edge_from_label_sets(2, [set()]) == flat_prior(2)
    assert edge_from_label_sets(4, []) == flat_prior(4)


def test_edge_matches_counter():
    """
    The vectorized construction must agree entry for entry with a naive
    counter on random label sets.
    """
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = int(rng.integers(1, 9))
        n = int(rng.integers(0, 51))
        samples = random_samples(rng, k, n)
        edge = edge_from_label_sets(k, samples)
        assert (edge.values == brute_force_edge(k, samples)).all()
        # single-sample construction for larger k
        k = int(rng.integers(1, 11))
        sample = random_samples(rng, k, 1)
        assert (edge_from_label_sets(k, sample).values == brute_force_edge(k, sample)).all()


def test_out_of_range_label():
    with pytest.raises(ValueError):
        edge_from_label_sets(3, [{0, 3}])
    with pytest.raises(ValueError):
        LabelSet([-1])


def test_edge_is_not_symmetric():
    e = edge_from_label_sets(2, [{0, 1}, {0}])
    # P(0|1) = 1 but P(1|0) = 1/2
    assert e.values[0, 1] == 1.0
    assert e.values[1, 0] == 0.5


def test_flip_edge():
    """
    Flipping maps v to 1 - v off the diagonal, so it fixes E0 and is an involution.
    """
    assert flip_edge(flat_prior(4)) == flat_prior(4)
    e_x = edge_from_label_sets(3, [{0, 2}])
    assert flip_edge(e_x).column(0).tolist() == [1.0, 1.0, 0.0]

    rng = np.random.default_rng(1)
    for _ in range(20):
        e = clip_edge(rng.random((5, 5)))
        assert np.allclose(flip_edge(flip_edge(e)).values, e.values, atol=1e-15)


def test_delta():
    assert (delta(flat_prior(5)).values == 0).all()
    e_x = edge_from_label_sets(3, [{0, 2}])
    assert delta(e_x).values[:, 0].tolist() == [0.0, -0.5, 0.5]
    ones = EdgeMatrix(np.ones((3, 3)))
    expected = np.full((3, 3), 0.5)
    np.fill_diagonal(expected, 0.0)
    assert (delta(ones).values == expected).all()
    with pytest.raises(ValueError):
        DeltaEdge([[0.0, 0.6], [0.0, 0.0]])


def test_edge_mae():
    """
    MAE averages over all K^2 entries and reports percentiles of |a - b|.
    """
    e0 = flat_prior(2)
    comparison = edge_mae(e0, e0)
    assert comparison.mae == 0
    assert all(v == 0 for v in comparison.percentiles.values())

    ones = EdgeMatrix(np.ones((2, 2)))
    comparison = edge_mae(e0, ones)
    assert comparison.mae == 0.25
    assert comparison.max == 0.5

    with pytest.raises(EdgeValidationError):
        edge_mae(flat_prior(2), flat_prior(3))
    with pytest.raises(EdgeValidationError):
        edge_mae(flat_prior(2), flat_prior(2, class_ids=[1, 5]))


def test_edge_mae_is_a_metric():
    rng = np.random.default_rng(2)
    for _ in range(50):
        a, b, c = (clip_edge(rng.random((4, 4))) for _ in range(3))
        ab, ba = edge_mae(a, b).mae, edge_mae(b, a).mae
        assert ab >= 0 and ab == ba
        assert edge_mae(a, c).mae <= ab + edge_mae(b, c).mae + 1e-12


def test_edge_validation():
    with pytest.raises(EdgeValidationError):
        EdgeMatrix([[1.0, 1.2], [0.0, 1.0]])
    with pytest.raises(EdgeValidationError):
        EdgeMatrix([[0.9, 0.5], [0.5, 1.0]])
    with pytest.raises(EdgeValidationError):
        EdgeMatrix([[1.0, np.nan], [0.5, 1.0]])
    with pytest.raises(EdgeValidationError):
        EdgeMatrix(np.ones((2, 3)))
    with pytest.raises(EdgeValidationError):
        flat_prior(2, class_ids=[3, 3])


def test_edge_file_round_trip(tmp_path):
    """
    Fractions such as 2/3 survive a save and load bit for bit.
    """
    e = edge_from_label_sets(3, [{0, 2}, {1, 2}, {0, 1, 2}], class_ids=[1, 7, 9])
    path = tmp_path / "edge.json"
    e.save(path)
    loaded = EdgeMatrix.load(path)
    assert loaded == e
    assert loaded.class_ids == (1, 7, 9)
    assert loaded.digest() == e.digest()

    e.to_csv(tmp_path / "edge.csv")
    lines = (tmp_path / "edge.csv").read_text().splitlines()
    assert lines[0] == "1,7,9"
    assert len(lines) == 4

    path.write_text('{"k": 3, "class_ids": [0, 1], "values": [[1.0]]}')
    with pytest.raises(EdgeValidationError):
        EdgeMatrix.load(path)


def test_alignment():
    """
    m_j measures how far column j of an edge leans the way the sample's own
    edge does; the flipped edge leans the other way by the same amount.
    """
    e_x = edge_from_label_sets(3, [{0, 2}])
    m = alignment(e_x, e_x)
    assert np.allclose(m, [1 / 3, 0, 1 / 3])
    assert np.allclose(alignment(flip_edge(e_x), e_x), -m)
    assert (alignment(flat_prior(3), e_x) == 0).all()
