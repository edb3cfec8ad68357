import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedembed.data import (
    MNIST_IMBALANCED,
    PopulationSpec,
    StyledDataset,
    build_population,
    gen_interpolated_dataset,
    interpolation_weights,
    largest_remainder,
    load_mnist_idx,
    read_idx,
    subpop_counts,
    write_idx,
)
from fedembed.errors import ConfigurationError, IngestionError


def toy_samples(K=4, per=30, side=4, seed=0):
    rng = np.random.default_rng(seed)
    styles = np.repeat(np.arange(K), per)
    return StyledDataset(rng.uniform(size=(len(styles), side, side)), styles)


def test_idx_round_trip(tmp_path):
    a = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    for name in ("x.idx", "x.idx.gz"):
        write_idx(tmp_path / name, a)
        assert np.array_equal(read_idx(tmp_path / name), a)


def test_idx_bad_magic_names_offset(tmp_path):
    (tmp_path / "bad").write_bytes(struct.pack(">I", 0x12345678) + b"\0" * 8)
    with pytest.raises(IngestionError, match="byte offset 0"):
        read_idx(tmp_path / "bad")


def test_idx_truncated_payload(tmp_path):
    raw = struct.pack(">I", 0x0801) + struct.pack(">I", 10) + b"\1" * 4
    (tmp_path / "t").write_bytes(raw)
    with pytest.raises(IngestionError, match="truncated payload at byte offset 12"):
        read_idx(tmp_path / "t")


def test_load_mnist_scales_to_unit_interval(tmp_path):
    write_idx(tmp_path / "i.gz", np.full((3, 28, 28), 255, np.uint8))
    write_idx(tmp_path / "l.gz", np.array([0, 1, 2], np.uint8))
    ds = load_mnist_idx(tmp_path / "i.gz", tmp_path / "l.gz")
    assert ds.images.max() == 1.0 and ds.num_styles == 3


def test_label_magic_checked(tmp_path):
    write_idx(tmp_path / "i", np.zeros((3, 2, 2), np.uint8))
    with pytest.raises(IngestionError, match="expected 0x00000801"):
        load_mnist_idx(tmp_path / "i", tmp_path / "i")


def test_write_idx_is_byte_stable(tmp_path):
    a = np.arange(10, dtype=np.uint8)
    write_idx(tmp_path / "a.gz", a)
    write_idx(tmp_path / "b.gz", a)
    assert (tmp_path / "a.gz").read_bytes() == (tmp_path / "b.gz").read_bytes()
    assert gzip.decompress((tmp_path / "a.gz").read_bytes())[:4] == b"\0\0\x08\x01"


@given(st.lists(st.integers(1, 20), min_size=2, max_size=10), st.integers(10, 500))
@settings(max_examples=50, deadline=None)
def test_largest_remainder_sums_to_total(weights, total):
    p = np.array(weights) / sum(weights)
    counts = largest_remainder(p, total)
    assert counts.sum() == total
    assert np.all(np.abs(counts - p * total) < 1.0)


def test_imbalanced_counts():
    counts = subpop_counts(PopulationSpec(10, MNIST_IMBALANCED, 300))
    assert counts.tolist() == [75, 45, 30, 30, 30, 30, 15, 15, 15, 15]


def test_bad_proportions_rejected():
    with pytest.raises(ConfigurationError, match="sum"):
        subpop_counts(PopulationSpec(3, (0.3, 0.3, 0.3), 30))


def test_population_labels_and_splits():
    ds = toy_samples()
    users = build_population(ds, PopulationSpec(4, (0.25,) * 4, 12, seed=3))
    assert [u.user_id for u in users] == list(range(12))
    for u in users:
        d = u.data
        assert len(d.train_idx) == 20 and len(d.test_idx) == 10
        assert d.train_y.sum() == 10 and d.test_y.sum() == 5
        assert np.array_equal(ds.styles[d.train_idx] == u.subpop, d.train_y == 1)
        assert np.array_equal(ds.styles[d.test_idx] == u.subpop, d.test_y == 1)
        both = np.concatenate([d.train_idx, d.test_idx])
        assert len(np.unique(both)) == len(both)


def test_population_is_seeded():
    ds = toy_samples()
    a = build_population(ds, PopulationSpec(4, (0.25,) * 4, 8, seed=1))
    b = build_population(ds, PopulationSpec(4, (0.25,) * 4, 8, seed=1))
    c = build_population(ds, PopulationSpec(4, (0.25,) * 4, 8, seed=2))
    assert all(np.array_equal(x.data.train_idx, y.data.train_idx) for x, y in zip(a, b))
    assert any(not np.array_equal(x.data.train_idx, y.data.train_idx) for x, y in zip(a, c))


def test_interpolation_weights_are_convex_and_shared():
    w = interpolation_weights(8, 20)
    assert np.allclose(w.sum(1), 1.0) and np.all(w >= 0)
    assert np.all((w > 0).sum(1) <= 2)
    # neighbours share a base style
    assert all(np.any((w[j] > 0) & (w[(j + 1) % 20] > 0)) for j in range(20))


def test_synthetic_dataset_shape_and_range():
    ds = gen_interpolated_dataset(8, 20, 5, 0.3, seed=0, side=12)
    assert ds.images.shape == (100, 12, 12)
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    assert ds.num_styles == 20
    again = gen_interpolated_dataset(8, 20, 5, 0.3, seed=0, side=12)
    assert np.array_equal(ds.images, again.images)
