import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from dgnet.data import (DatasetIndex, Entry, ImageCache, ResizeSchedule, SplitSpec, batch_iterator, center_crop,
                        epoch_order, index_directory, load_image, progressive_size, resize_bilinear, save_image,
                        split_dataset, to_uint8, worker_count, write_manifest, read_manifest)
from dgnet.errors import ConfigurationError
from dgnet.tensor import Tensor


def make_paired_dir(root, n, size=8):
    rng = np.random.default_rng(0)
    for sub in ("raw", "reference"):
        (root / sub).mkdir(parents=True)
    for k in range(n):
        for sub in ("raw", "reference"):
            Image.fromarray(rng.integers(0, 256, (size, size, 3), dtype=np.uint8)).save(root / sub / f"im{k:03d}.png")
    return root


def test_image_roundtrip_is_lossless(tmp_path, rng):
    arr = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    Image.fromarray(arr).save(tmp_path / "a.png")
    img = load_image(tmp_path / "a.png")
    assert img.shape == (1, 3, 5, 7) and img.data.min() >= 0 and img.data.max() <= 1
    save_image(img, tmp_path / "b.png")
    np.testing.assert_array_equal(np.asarray(Image.open(tmp_path / "b.png")), arr)


def test_load_image_error_names_path(tmp_path):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(OSError, match="broken.png"):
        load_image(bad)


def test_to_uint8_rounds_and_clips():
    arr = np.array([[[[-0.1, 0.5 / 255, 1.7 / 255, 1.2]]]]).repeat(3, axis=1)
    np.testing.assert_array_equal(to_uint8(arr)[0, :, 0], [0, 0, 2, 255])


def test_index_directory_pairs_by_name(tmp_path):
    idx = index_directory(make_paired_dir(tmp_path, 3))
    assert idx.kind == "paired" and idx.ids() == ["im000", "im001", "im002"]


def test_index_missing_reference(tmp_path):
    root = make_paired_dir(tmp_path, 2)
    (root / "reference" / "im001.png").unlink()
    with pytest.raises(OSError):
        index_directory(root)


def test_unpaired_index(tmp_path):
    (tmp_path / "raw").mkdir()
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "raw" / "x.png")
    idx = index_directory(tmp_path)
    assert idx.kind == "unpaired" and idx.entries[0].reference_path is None


def test_manifest_overrides_scan(tmp_path):
    root = make_paired_dir(tmp_path / "d", 4)
    full = index_directory(root)
    write_manifest(full.subset(["im003", "im001"]), tmp_path / "m.txt")
    assert (tmp_path / "m.txt").read_text() == "im003.png\nim001.png\n"
    assert read_manifest(tmp_path / "m.txt", root).ids() == ["im003", "im001"]


def test_dataset_index_invariants():
    with pytest.raises(ConfigurationError):
        DatasetIndex([Entry("a", "x"), Entry("a", "y")], "unpaired")
    with pytest.raises(ConfigurationError):
        DatasetIndex([Entry("a", "x")], "paired")
    with pytest.raises(ConfigurationError):
        DatasetIndex([], "other")


def _fake_index(n):
    return DatasetIndex([Entry(f"{k:04d}", f"r{k}", f"g{k}") for k in range(n)], "paired")


def test_split_counts_and_disjointness():
    train, val = split_dataset(_fake_index(890), SplitSpec())
    assert (len(train), len(val)) == (800, 90)
    assert not set(train.ids()) & set(val.ids())


def test_split_independent_of_listing_order():
    idx = _fake_index(30)
    shuffled = DatasetIndex(list(reversed(idx.entries)), "paired")
    spec = SplitSpec(20, 5, 7)
    assert split_dataset(idx, spec)[0].ids() == split_dataset(shuffled, spec)[0].ids()


def test_split_too_large():
    with pytest.raises(ConfigurationError):
        split_dataset(_fake_index(10), SplitSpec(8, 3, 0))


@pytest.mark.parametrize("schedule, sizes", [
    (ResizeSchedule(), [256, 304, 352, 400]),
    (ResizeSchedule(48, 96, 4), [48, 64, 80, 96]),
    (ResizeSchedule(64, 128, 1), [128]),
])
def test_schedule_sizes(schedule, sizes):
    assert schedule.sizes() == sizes
    assert all(s % 8 == 0 for s in schedule.sizes())


def test_progressive_size_endpoints():
    s = ResizeSchedule()
    assert progressive_size(0, 300, s) == 256
    assert progressive_size(299, 300, s) == 400
    assert [progressive_size(e, 8, s) for e in range(8)] == [256, 256, 304, 304, 352, 352, 400, 400]
    with pytest.raises(ConfigurationError):
        progressive_size(300, 300, s)


@pytest.mark.parametrize("kwargs", [dict(stages=0), dict(start_size=400, end_size=256), dict(start_size=250)])
def test_schedule_validation(kwargs):
    with pytest.raises(ConfigurationError):
        ResizeSchedule(**kwargs)


def test_resize_identity_and_corners(rng):
    img = Tensor(rng.random((1, 3, 6, 9)))
    assert np.array_equal(resize_bilinear(img, (6, 9)).data, img.data)
    out = resize_bilinear(img, (11, 4)).data
    for (i, j), (y, x) in {(0, 0): (0, 0), (0, -1): (0, -1), (-1, 0): (-1, 0), (-1, -1): (-1, -1)}.items():
        assert np.allclose(out[..., i, j], img.data[..., y, x])


def test_resize_linear_ramp_exact(f64):
    ramp = np.linspace(0, 1, 5)[None, None, None, :].repeat(3, axis=1).repeat(2, axis=2)
    out = resize_bilinear(Tensor(ramp), (2, 9)).data
    np.testing.assert_allclose(out[0, 0, 0], np.linspace(0, 1, 9), atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (1, 3, 5, 7), elements=st.floats(0, 1)), st.integers(1, 12), st.integers(1, 12))
def test_resize_never_overshoots(img, h, w):
    out = resize_bilinear(Tensor(img, dtype=np.float64), (h, w)).data
    assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


def test_center_crop_multiple():
    img = Tensor(np.arange(3 * 19 * 21, dtype=float).reshape(1, 3, 19, 21))
    out = center_crop(img)
    assert out.shape == (1, 3, 16, 16)
    np.testing.assert_array_equal(out.data, img.data[..., 1:17, 2:18])


def test_batch_iterator_covers_epoch_and_is_deterministic(tiny_split):
    train, _ = tiny_split
    cache = ImageCache()
    runs = [[ids for ids, _, _ in batch_iterator(train, 3, 16, 0, 2, cache)] for _ in range(2)]
    assert runs[0] == runs[1]
    assert sorted(i for b in runs[0] for i in b) == sorted(train.ids())
    other = [ids for ids, _, _ in batch_iterator(train, 3, 16, 0, 3, cache)]
    assert len(other) == 2


def test_batch_iterator_shapes_and_partial_batch(tiny_split):
    train, _ = tiny_split
    batches = list(batch_iterator(train, 3, 24, 0, 0))
    assert [len(ids) for ids, _, _ in batches] == [3, 1]
    ids, raw, ref = batches[0]
    assert raw.shape == ref.shape == (3, 3, 24, 24)


def test_batch_count_for_full_training_set():
    assert len(range(0, 800, 5)) == 160
    order = epoch_order(800, 0, 0)
    assert sorted(order) == list(range(800))


def test_batch_iterator_errors():
    with pytest.raises(ConfigurationError):
        next(batch_iterator(DatasetIndex([], "paired"), 5, 16, 0, 0))
    with pytest.raises(ConfigurationError):
        next(batch_iterator(_fake_index(3), 0, 16, 0, 0))


def test_worker_count_honours_env(monkeypatch):
    monkeypatch.setenv("DGNET_THREADS", "2")
    assert worker_count(8) == 2
    monkeypatch.setenv("DGNET_THREADS", "x")
    with pytest.raises(ConfigurationError):
        worker_count()
    monkeypatch.delenv("DGNET_THREADS")
    assert worker_count(3) == 3
