import gzip

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perfbp.data import (Dataset, SplitSpec, batches, gen_two_spirals, gen_xor_quadrants,
                         load_csv, load_idx, load_mnist5k, save_csv, split, split_indices,
                         write_idx)
from perfbp.errors import DataError

# Three 28x28 images and their labels, spelled out byte by byte:
# magic 0x00000803, count 3, rows 28, cols 28, then 3*784 pixels.
IMAGE_HEADER = bytes([0, 0, 8, 3, 0, 0, 0, 3, 0, 0, 0, 28, 0, 0, 0, 28])
LABEL_HEADER = bytes([0, 0, 8, 1, 0, 0, 0, 3])


def pixels():
    img = bytearray(3 * 784)
    img[0] = 255          # image 0, row 0, col 0
    img[784 + 28] = 51    # image 1, row 1, col 0
    img[2 * 784 + 1] = 102  # image 2, row 0, col 1
    return bytes(img)


@pytest.fixture
def idx_pair(tmp_path):
    images = tmp_path / "img.idx"
    labels = tmp_path / "lab.idx"
    images.write_bytes(IMAGE_HEADER + pixels())
    labels.write_bytes(LABEL_HEADER + bytes([7, 0, 7]))
    return images, labels


class TestIdx:
    def test_fixture(self, idx_pair):
        ds = load_idx(*idx_pair)
        assert len(ds) == 3
        assert ds.inputs.shape == (3, 1, 28, 28)
        assert ds.labels.tolist() == [7, 0, 7]
        assert ds.inputs[0, 0, 0, 0] == 1.0
        assert ds.inputs[1, 0, 1, 0] == 0.2
        assert ds.inputs[2, 0, 0, 1] == 0.4
        assert ds.inputs.sum() == pytest.approx(1.6)
        assert ds.inputs.min() >= 0 and ds.inputs.max() <= 1

    def test_transpose(self, idx_pair):
        ds = load_idx(*idx_pair, transpose=True)
        assert ds.inputs[2, 0, 1, 0] == 0.4

    def test_gzip_and_writer(self, idx_pair, tmp_path):
        raw = idx_pair[0].read_bytes()
        (tmp_path / "img.gz").write_bytes(gzip.compress(raw))
        a = load_idx(tmp_path / "img.gz", idx_pair[1])
        b = load_idx(*idx_pair)
        assert a.inputs.tobytes() == b.inputs.tobytes()
        write_idx(tmp_path / "w.idx", np.frombuffer(pixels(), np.uint8).reshape(3, 28, 28))
        assert (tmp_path / "w.idx").read_bytes() == raw

    def test_bad_magic(self, idx_pair):
        idx_pair[1].write_bytes(bytes([0, 0, 8, 2, 0, 0, 0, 3, 7, 0, 7]))
        with pytest.raises(DataError, match="bad magic"):
            load_idx(*idx_pair)

    def test_count_mismatch(self, tmp_path):
        write_idx(tmp_path / "i", np.zeros((10, 2, 2), np.uint8))
        write_idx(tmp_path / "l", np.zeros(9, np.uint8))
        with pytest.raises(DataError, match="count mismatch"):
            load_idx(tmp_path / "i", tmp_path / "l")

    def test_truncated(self, idx_pair):
        idx_pair[0].write_bytes(IMAGE_HEADER + pixels()[:-1])
        with pytest.raises(DataError, match="truncated"):
            load_idx(*idx_pair)
        idx_pair[0].write_bytes(IMAGE_HEADER[:10])
        with pytest.raises(DataError, match="truncated"):
            load_idx(*idx_pair)

    def test_determinism(self, idx_pair):
        a, b = load_idx(*idx_pair), load_idx(*idx_pair)
        assert a.inputs.tobytes() == b.inputs.tobytes() and a.labels.tobytes() == b.labels.tobytes()

    def test_bundled_mnist_subset(self):
        ds = load_mnist5k()
        assert ds.inputs.shape == (5000, 1, 28, 28)
        assert np.bincount(ds.labels).tolist() == [500] * 10


class TestCsv:
    def test_small_fixture(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("f1,f2,label\n1.5,2,cat\n-3,4e-1,dog\n")
        ds = load_csv(p, "label")
        assert len(ds) == 2 and ds.class_count == 2
        assert ds.inputs.tolist() == [[1.5, 2.0], [-3.0, 0.4]]
        assert ds.class_names == ["cat", "dog"]

    def test_first_appearance_ids(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("x,y\n1,b\n2,a\n3,b\n")
        assert load_csv(p, "y").labels.tolist() == [0, 1, 0]

    def test_bad_cell_reports_row(self, tmp_path):
        p = tmp_path / "a.csv"
        rows = ["1,0"] * 4 + ["oops,1"] + ["2,0"]
        p.write_text("x,label\n" + "\n".join(rows) + "\n")
        with pytest.raises(DataError, match="row 5"):
            load_csv(p, "label")

    def test_missing_column(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("x,label\n1,0\n")
        with pytest.raises(DataError, match="missing column"):
            load_csv(p, "class")
        with pytest.raises(DataError, match="missing column"):
            load_csv(p, "label", ["x", "z"])

    def test_round_trip_1000_rows(self, tmp_path, rng):
        x = rng.normal(size=(1000, 4)) * 10.0 ** rng.integers(-5, 5, size=(1000, 4))
        ds = Dataset(x, rng.integers(0, 3, size=1000), 3, "r", ["a", "b", "c"])
        save_csv(ds, tmp_path / "r.csv")
        back = load_csv(tmp_path / "r.csv", "label")
        assert back.inputs.tobytes() == x.tobytes()
        assert [back.class_names[k] for k in back.labels] == [ds.class_names[k] for k in ds.labels]


class TestSynthetic:
    def test_single_point_per_class(self):
        ds = gen_two_spirals(1, 0.0, 0)
        np.testing.assert_allclose(ds.inputs, [[0.1, 0.0], [-0.1, 0.0]], atol=1e-15)
        assert ds.labels.tolist() == [0, 1]

    def test_seeded_bytes(self):
        a, b = gen_two_spirals(50, 0.1, 3), gen_two_spirals(50, 0.1, 3)
        assert a.inputs.tobytes() == b.inputs.tobytes()
        assert gen_two_spirals(50, 0.1, 4).inputs.tobytes() != a.inputs.tobytes()

    def test_nearest_neighbour_on_held_out_rotation(self):
        train = gen_two_spirals(100, 0.0, 0)
        held = gen_two_spirals(100, 0.0, 0, offset=0.5)
        d = ((held.inputs[:, None, :] - train.inputs[None, :, :]) ** 2).sum(axis=2)
        pred = train.labels[d.argmin(axis=1)]
        assert (pred == held.labels).mean() == 1.0

    def test_xor_not_linearly_separable_but_balanced(self):
        ds = gen_xor_quadrants(400, seed=0)
        assert len(ds) == 400
        assert abs(ds.labels.mean() - 0.5) < 0.1
        assert np.all((ds.inputs[:, 0] * ds.inputs[:, 1] > 0) == ds.labels.astype(bool))

    def test_xor_margin(self):
        ds = gen_xor_quadrants(200, seed=1, margin=0.2)
        assert np.abs(ds.inputs).min() > 0.2

    def test_invalid(self):
        with pytest.raises(ValueError):
            gen_two_spirals(0)
        with pytest.raises(ValueError):
            gen_two_spirals(5, noise=-1)


class TestSplit:
    def test_sizes(self):
        ds = Dataset(np.arange(10.0)[:, None], np.zeros(10, np.int64), 1)
        tr, va, te = split(ds, SplitSpec(0.8, 0.1, 0.1, seed=0))
        assert (len(tr), len(va), len(te)) == (8, 1, 1)

    def test_same_seed_same_partition(self):
        a = split_indices(100, SplitSpec(seed=5))
        b = split_indices(100, SplitSpec(seed=5))
        c = split_indices(100, SplitSpec(seed=6))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not np.array_equal(a[0], c[0])

    def test_stratified_two_class(self):
        labels = np.repeat([0, 1], 100)
        ds = Dataset(np.zeros((200, 1)), labels, 2)
        for part in split(ds, SplitSpec(0.8, 0.1, 0.1, seed=1, stratified=True)):
            assert abs(part.labels.mean() - 0.5) <= 1 / len(part)

    def test_stratified_within_five_points(self, rng):
        labels = rng.integers(0, 4, size=800)
        ds = Dataset(np.zeros((800, 1)), labels, 4)
        parent = np.bincount(labels) / 800
        for part in split(ds, SplitSpec(0.6, 0.2, 0.2, seed=2, stratified=True)):
            assert np.abs(np.bincount(part.labels, minlength=4) / len(part) - parent).max() < 0.05

    @settings(max_examples=50, deadline=None)
    @given(st.integers(3, 300), st.integers(0, 1000), st.booleans())
    def test_partition_property(self, n, seed, stratified):
        labels = np.random.default_rng(seed).integers(0, 3, size=n)
        parts = split_indices(n, SplitSpec(0.6, 0.2, 0.2, seed=seed, stratified=stratified), labels)
        allidx = np.concatenate(parts)
        assert sorted(allidx.tolist()) == list(range(n))

    def test_empty_split_is_error(self):
        ds = Dataset(np.zeros((3, 1)), np.zeros(3, np.int64), 1)
        with pytest.raises(DataError, match="0 samples"):
            split(ds, SplitSpec(0.8, 0.1, 0.1))

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            SplitSpec(0.8, 0.3, 0.1)
        with pytest.raises(ValueError):
            SplitSpec(1.0, 0.0, 0.0)

    def test_test_fraction_zero(self):
        ds = Dataset(np.zeros((10, 1)), np.zeros(10, np.int64), 1)
        tr, va, te = split(ds, SplitSpec(0.9, 0.1, 0.0))
        assert te is None and len(tr) + len(va) == 10


class TestBatches:
    def test_sizes(self):
        assert [len(b) for b in batches(10, 3)] == [3, 3, 3, 1]

    def test_unshuffled_order(self):
        assert np.concatenate(batches(10, 4)).tolist() == list(range(10))

    def test_shuffle_deterministic_per_epoch(self):
        a = np.concatenate(batches(50, 7, shuffle_seed=1, epoch=1))
        b = np.concatenate(batches(50, 7, shuffle_seed=1, epoch=1))
        c = np.concatenate(batches(50, 7, shuffle_seed=1, epoch=2))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 200), st.integers(1, 50), st.one_of(st.none(), st.integers(0, 99)))
    def test_epoch_coverage(self, n, bs, seed):
        idx = np.concatenate(batches(n, bs, seed))
        assert sorted(idx.tolist()) == list(range(n))

    def test_accepts_dataset(self):
        ds = Dataset(np.zeros((5, 1)), np.zeros(5, np.int64), 1)
        assert [len(b) for b in batches(ds, 2)] == [2, 2, 1]

    def test_bad_batch_size(self):
        with pytest.raises(ValueError):
            batches(5, 0)
