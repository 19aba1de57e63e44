import struct

import numpy as np
import pytest

from imcret.dataset import (
    BatchPlan,
    FeatureStore,
    SplitSpec,
    batches,
    generate_synthetic,
    load_store,
    make_split,
    read_features,
    save_store,
    write_features,
)
from imcret.errors import DataError


@pytest.fixture
def small_store(rng):
    return FeatureStore(rng.standard_normal((3, 4)), rng.standard_normal((15, 5)), np.repeat(np.arange(3), 5))


def paths(tmp_path):
    return tmp_path / "img.cmfv", tmp_path / "txt.cmfv", tmp_path / "index.csv"


def test_round_trip(tmp_path, small_store):
    save_store(small_store, *paths(tmp_path))
    loaded = load_store(*paths(tmp_path))
    assert (loaded.num_images, loaded.num_captions) == (3, 15)
    assert loaded == small_store


def test_feature_file_layout(tmp_path):
    feats = np.arange(6, dtype=np.float64).reshape(2, 3)
    write_features(tmp_path / "f", feats)
    raw = (tmp_path / "f").read_bytes()
    assert raw[:4] == b"CMFV"
    assert struct.unpack("<III", raw[4:16]) == (1, 2, 3)
    assert struct.unpack("<6d", raw[16:]) == tuple(range(6))


def test_bad_magic_and_version(tmp_path):
    write_features(tmp_path / "f", np.ones((2, 2)))
    raw = bytearray((tmp_path / "f").read_bytes())
    (tmp_path / "g").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DataError, match="magic"):
        read_features(tmp_path / "g")
    (tmp_path / "h").write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(DataError, match="version"):
        read_features(tmp_path / "h")
    (tmp_path / "t").write_bytes(raw[:-3])
    with pytest.raises(DataError):
        read_features(tmp_path / "t")


def test_non_finite_values_rejected(tmp_path):
    write_features(tmp_path / "f", np.array([[1.0, np.nan]]))
    with pytest.raises(DataError):
        read_features(tmp_path / "f")


def test_index_referencing_missing_image(tmp_path, small_store):
    img, txt, idx = paths(tmp_path)
    save_store(small_store, img, txt, idx)
    lines = idx.read_text().splitlines()
    lines[1] = "0,99"
    idx.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match="99"):
        load_store(img, txt, idx)


def test_store_invariants(rng):
    with pytest.raises(DataError, match="no caption"):
        FeatureStore(rng.standard_normal((3, 2)), rng.standard_normal((2, 2)), [0, 1])
    with pytest.raises(DataError):
        FeatureStore(rng.standard_normal((3, 2)), rng.standard_normal((2, 2)), [0, 1, 2])


def test_synthetic_sizes(rng):
    store = generate_synthetic(rng, num_classes=100, captions_per_image=5)
    assert (store.num_images, store.num_captions) == (100, 500)
    assert store.image_feats.shape[1] == 64 and store.text_feats.shape[1] == 64


def test_synthetic_zero_noise_identity_maps(rng):
    store = generate_synthetic(rng, num_classes=10, d_in_img=8, d_in_txt=8, latent_dim=8,
                               noise_sigma=0.0, identity_maps=True)
    img = store.image_feats[store.caption_to_image]
    np.testing.assert_allclose(img, store.text_feats, atol=0)


def test_synthetic_classes_recoverable_at_default_noise():
    store = generate_synthetic(np.random.default_rng(42))
    maps = store.maps
    for feats, fmap, labels in (
        (store.image_feats, maps.image_map, np.arange(store.num_images)),
        (store.text_feats, maps.text_map, store.caption_to_image),
    ):
        centroids = maps.class_dirs @ fmap
        unit = feats / np.linalg.norm(feats, axis=1, keepdims=True)
        cu = centroids / np.linalg.norm(centroids, axis=1, keepdims=True)
        assigned = np.argmax(unit @ cu.T, axis=1)
        assert np.mean(assigned == labels) >= 0.99


def test_split_partition_and_folds():
    split = make_split(100, seed=3)
    ids = np.concatenate([split.train_ids, split.val_ids, split.test_ids])
    assert np.array_equal(np.sort(ids), np.arange(100))
    assert len(split.folds) == 5
    assert {f.size for f in split.folds} == {split.test_ids.size // 5}
    assert np.array_equal(np.concatenate(split.folds), split.test_ids)
    assert make_split(100, seed=3).test_ids.tolist() == split.test_ids.tolist()


def test_split_validation():
    with pytest.raises(DataError):
        SplitSpec([0, 1], [1], [2])
    with pytest.raises(DataError):
        SplitSpec([0], [1], [2, 3, 4], folds=([2], [3, 4]))


def test_batch_sizes_with_drop_rule(rng):
    store = FeatureStore(rng.standard_normal((10, 2)), rng.standard_normal((10, 2)), np.arange(10))
    split = SplitSpec(np.arange(10), [], [])
    assert [b.caption_ids.size for b in batches(store, split, BatchPlan(0, 4))] == [4, 4, 2]
    store9 = FeatureStore(rng.standard_normal((9, 2)), rng.standard_normal((9, 2)), np.arange(9))
    split9 = SplitSpec(np.arange(9), [], [])
    assert [b.caption_ids.size for b in batches(store9, split9, BatchPlan(0, 4))] == [4, 4]


def test_batches_deterministic_and_cover_training_captions():
    store = generate_synthetic(np.random.default_rng(0), num_classes=30)
    split = make_split(30, seed=1)
    a, b = BatchPlan(5, 16), BatchPlan(5, 16)
    expected = set(store.captions_of(split.train_ids).tolist())
    for _ in range(3):
        ea, eb = list(batches(store, split, a)), list(batches(store, split, b))
        assert [x.caption_ids.tolist() for x in ea] == [x.caption_ids.tolist() for x in eb]
        seen = np.concatenate([x.caption_ids for x in ea])
        assert set(seen.tolist()) == expected and seen.size == len(expected)
        for x in ea:
            assert np.array_equal(x.image_ids, store.caption_to_image[x.caption_ids])
            assert np.array_equal(x.image_feats, store.image_feats[x.image_ids])
            assert np.array_equal(x.text_feats, store.text_feats[x.caption_ids])


def test_epochs_reshuffle():
    store = generate_synthetic(np.random.default_rng(0), num_classes=30)
    split = make_split(30, seed=1)
    plan = BatchPlan(5, 16)
    first = [x.caption_ids.tolist() for x in batches(store, split, plan)]
    second = [x.caption_ids.tolist() for x in batches(store, split, plan)]
    assert first != second
