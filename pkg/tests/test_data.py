import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sdvae.data import (
    IMAGE_MAGIC,
    LABEL_MAGIC,
    Dataset,
    IDXError,
    SyntheticSpec,
    binarize,
    dataset_to_idx,
    export_latents,
    export_reconstructions,
    load_idx,
    make_synthetic,
    nearest_template_predict,
    parse_idx,
    read_latents,
    serialize_idx,
    synthetic_templates,
    write_idx,
)
from sdvae.trainer import evaluate

from oracles import small_params


def idx_pair(tmp_path, n=5, rows=3, cols=2, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(n, rows, cols), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    write_idx(tmp_path / "img", images)
    write_idx(tmp_path / "lab", labels)
    return tmp_path / "img", tmp_path / "lab", images, labels


class TestIDX:
    def test_header_layout(self):
        buf = serialize_idx(np.zeros((2, 3, 4), dtype=np.uint8))
        assert struct.unpack(">iIII", buf[:16]) == (IMAGE_MAGIC, 2, 3, 4)
        assert struct.unpack(">iI", serialize_idx(np.zeros(7, dtype=np.uint8))[:8]) == (LABEL_MAGIC, 7)

    def test_load(self, tmp_path):
        img, lab, images, labels = idx_pair(tmp_path)
        assert load_idx(img, lab).k == int(labels.max()) + 1
        d = load_idx(img, lab, k=10)
        assert len(d) == 5 and d.dim_x == 6 and d.k == 10 and d.image_shape == (3, 2)
        np.testing.assert_array_equal(d.images, images.reshape(5, 6) / 255.0)
        np.testing.assert_array_equal(d.labels, labels)

    def test_file_round_trip_is_bit_exact(self, tmp_path):
        img, lab, _, _ = idx_pair(tmp_path)
        img_bytes, lab_bytes = dataset_to_idx(load_idx(img, lab))
        assert img_bytes == img.read_bytes() and lab_bytes == lab.read_bytes()

    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(
        st.sampled_from([np.uint8, np.int8, np.dtype(">i2"), np.dtype(">i4"), np.dtype(">f8")]),
        hnp.array_shapes(min_dims=1, max_dims=3, min_side=0, max_side=5),
    ))
    def test_parse_serialize_round_trip(self, array):
        buf = serialize_idx(array)
        assert serialize_idx(parse_idx(buf)) == buf

    def test_gzip(self, tmp_path):
        img, lab, images, _ = idx_pair(tmp_path)
        (tmp_path / "img.gz").write_bytes(gzip.compress(img.read_bytes()))
        np.testing.assert_array_equal(load_idx(tmp_path / "img.gz", lab).images, load_idx(img, lab).images)

    def test_swapped_files_fail_at_offset_zero(self, tmp_path):
        img, lab, _, _ = idx_pair(tmp_path)
        with pytest.raises(IDXError) as info:
            load_idx(lab, img)
        assert info.value.offset == 0 and "magic" in str(info.value)

    def test_empty_file(self, tmp_path):
        (tmp_path / "empty").write_bytes(b"")
        with pytest.raises(IDXError) as info:
            load_idx(tmp_path / "empty", tmp_path / "empty")
        assert "truncated" in str(info.value) and info.value.offset == 0

    def test_corrupted_magic(self, tmp_path):
        img, lab, _, _ = idx_pair(tmp_path)
        raw = bytearray(img.read_bytes())
        raw[0] = 0x7F
        img.write_bytes(bytes(raw))
        with pytest.raises(IDXError) as info:
            load_idx(img, lab)
        assert info.value.offset == 0 and "bad magic" in str(info.value)

    def test_truncated_data(self, tmp_path):
        img, lab, _, _ = idx_pair(tmp_path)
        img.write_bytes(img.read_bytes()[:-3])
        with pytest.raises(IDXError, match="truncated data"):
            load_idx(img, lab)

    def test_trailing_bytes(self):
        with pytest.raises(IDXError, match="trailing"):
            parse_idx(serialize_idx(np.zeros(3, dtype=np.uint8)) + b"\x00")

    def test_count_mismatch(self, tmp_path):
        img, _, _, _ = idx_pair(tmp_path)
        write_idx(tmp_path / "short", np.zeros(4, dtype=np.uint8))
        with pytest.raises(IDXError, match="labels for"):
            load_idx(img, tmp_path / "short")


class TestDataset:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            Dataset(np.array([[1.5]]), np.array([0]), 2)
        with pytest.raises(ValueError):
            Dataset(np.array([[0.5]]), np.array([2]), 2)

    def test_immutable(self):
        d = Dataset(np.zeros((2, 2)), np.array([0, 1]), 2)
        with pytest.raises(ValueError):
            d.images[0, 0] = 1.0


class TestBinarize:
    def test_below_threshold(self):
        d = Dataset(np.full((2, 3), 0.4), np.array([0, 1]), 2)
        np.testing.assert_array_equal(binarize(d).images, 0.0)

    def test_idempotent(self):
        d = Dataset(np.random.default_rng(0).uniform(size=(10, 5)), np.zeros(10, dtype=int), 1)
        once = binarize(d)
        np.testing.assert_array_equal(binarize(once).images, once.images)

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            binarize(Dataset(np.zeros((1, 1)), None, 1), 1.0)


class TestSynthetic:
    def test_templates_are_separated(self):
        t = synthetic_templates(SyntheticSpec())
        d = np.abs(t[:, None] - t[None]).sum(axis=2)
        assert d[~np.eye(4, dtype=bool)].min() >= 8

    def test_clean_samples_equal_templates(self):
        spec = SyntheticSpec(corruption=0.0, n_train=40, n_test=10)
        train, _ = make_synthetic(spec)
        t = synthetic_templates(spec)
        np.testing.assert_array_equal(train.images, t[train.labels])
        assert np.all(nearest_template_predict(train.images, t) == train.labels)

    def test_nearest_template_oracle(self):
        spec = SyntheticSpec()
        train, test = make_synthetic(spec)
        assert (len(train), len(test), train.dim_x, train.k) == (2000, 500, 64, 4)
        t = synthetic_templates(spec)
        for d in (train, test):
            assert np.mean(nearest_template_predict(d.images, t) == d.labels) >= 0.99

    def test_balanced_classes(self):
        train, _ = make_synthetic(SyntheticSpec())
        assert np.all(np.bincount(train.labels) == 500)

    def test_seeded(self):
        a, b = make_synthetic(SyntheticSpec(seed=3)), make_synthetic(SyntheticSpec(seed=3))
        assert a[0].images.tobytes() == b[0].images.tobytes()
        assert a[1].labels.tobytes() == b[1].labels.tobytes()
        assert make_synthetic(SyntheticSpec(seed=4))[0].images.tobytes() != a[0].images.tobytes()


class TestExport:
    @pytest.fixture
    def model_and_data(self):
        spec = SyntheticSpec(side=2, n_train=8, n_test=12, min_hamming=1, k=2)
        _, test = make_synthetic(spec)
        return small_params(dim_u=3, k=2), test

    def test_latents(self, tmp_path, model_and_data):
        params, data = model_and_data
        export_latents(params, data, tmp_path / "lat.csv")
        lines = (tmp_path / "lat.csv").read_text().splitlines()
        assert len(lines) == len(data) + 1
        assert lines[0] == "label,v0,v1,u0,u1,u2"
        labels, v, u = read_latents(tmp_path / "lat.csv")
        np.testing.assert_array_equal(labels, data.labels)
        np.testing.assert_allclose(v.sum(axis=1), 1.0, atol=1e-9)
        assert u.shape == (len(data), 3)

    def test_latents_deterministic(self, tmp_path, model_and_data):
        params, data = model_and_data
        export_latents(params, data, tmp_path / "a.csv")
        export_latents(params, data, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_reconstructions(self, tmp_path, model_and_data):
        params, data = model_and_data
        re = export_reconstructions(params, data, "none", tmp_path / "rec.csv")
        rows = (tmp_path / "rec.csv").read_text().splitlines()
        assert len(rows) == len(data) + 1
        assert all(len(r.split(",")) == data.dim_x for r in rows)
        assert re == evaluate(params, data).test_re
        side = np.loadtxt(tmp_path / "rec.csv.re.csv", delimiter=",", skiprows=1, usecols=1)
        assert side.shape == (len(data),) and side.mean() == pytest.approx(re, abs=1e-12)

    def test_unwritable_path(self, tmp_path, model_and_data):
        params, data = model_and_data
        with pytest.raises(OSError):
            export_latents(params, data, tmp_path / "missing" / "lat.csv")
