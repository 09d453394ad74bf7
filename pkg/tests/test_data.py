import numpy as np
import pytest
from PIL import Image
from scipy import stats

from rpnet import (ClassSplit, Dataset, augment, load_image_folder, load_omniglot,
                   make_split, random_augment, sample_episode, sample_pair_batch,
                   synthetic_blobs, synthetic_glyphs)
from rpnet.exceptions import IngestionError, IntegrityError, SamplingError

from conftest import write_omniglot_tree


def tiny_dataset(num_classes, per_class=2):
    return Dataset([np.zeros((per_class, 1, 1, 1), np.float32) for _ in range(num_classes)])


# ---------------------------------------------------------------- loading

def test_load_omniglot_shapes_polarity_and_order(tmp_path):
    root = tmp_path / "omni"
    ink = write_omniglot_tree(root, {"Beta": 2, "Alpha": 3})
    ds = load_omniglot(root)
    assert ds.num_classes == 5
    assert ds.image_shape == (1, 28, 28)
    assert all(ds.class_size(c) == 20 for c in ds.class_ids)
    assert ds.class_names[:3] == ["Alpha/character01", "Alpha/character02", "Alpha/character03"]
    # inverted on load: strokes are 1, background 0 (8-bit quantisation only)
    for c in range(5):
        assert np.abs(ds.images[c] - ink[c]).max() <= 0.5 / 255 + 1e-6
    for arr in ds.images:
        assert arr.min() >= 0 and arr.max() <= 1


def test_character_index_sorts_numerically(tmp_path):
    root = tmp_path / "omni"
    for name in ("character10", "character2", "character1"):
        d = root / "A" / name
        d.mkdir(parents=True)
        for i in range(20):
            Image.new("L", (4, 4), 255).save(d / f"{i}.png")
    ds = load_omniglot(root, size=(4, 4))
    assert ds.class_names == ["A/character1", "A/character2", "A/character10"]


def test_official_subsets_are_merged(tmp_path):
    write_omniglot_tree(tmp_path / "images_background", {"Alpha": 2})
    write_omniglot_tree(tmp_path / "images_evaluation", {"Beta": 3}, seed=1)
    ds = load_omniglot(tmp_path)
    assert ds.num_classes == 5


def test_one_alphabet_of_14_characters(tmp_path):
    root = tmp_path / "omni"
    write_omniglot_tree(root, {"Hebrew": 14}, size=12)
    files = list(root.glob("Hebrew/*/*.png"))
    assert len(files) == 14 * 20
    ds = load_omniglot(root, size=(12, 12))
    assert ds.num_classes == 14


def test_empty_root_is_ingestion_error(tmp_path):
    with pytest.raises(IngestionError):
        load_omniglot(tmp_path)
    with pytest.raises(IngestionError):
        load_omniglot(tmp_path / "missing")


def test_wrong_image_count_is_integrity_error(omniglot_tree):
    victim = sorted((omniglot_tree / "Beta" / "character02").iterdir())[0]
    victim.unlink()
    with pytest.raises(IntegrityError, match="character02 has 19 images"):
        load_omniglot(omniglot_tree)


def test_corrupt_file_names_the_path(omniglot_tree):
    victim = sorted((omniglot_tree / "Alpha" / "character01").iterdir())[3]
    victim.write_bytes(b"not a png")
    with pytest.raises(IngestionError, match=victim.name):
        load_omniglot(omniglot_tree)


def test_image_folder_gray_rescale(tmp_path):
    d = tmp_path / "folder" / "only_class"
    d.mkdir(parents=True)
    Image.new("RGB", (50, 30), (128, 128, 128)).save(d / "a.png")
    ds = load_image_folder(tmp_path / "folder", size=(84, 84))
    assert ds.num_classes == 1 and ds.class_size(0) == 1
    assert ds.image_shape == (3, 84, 84)
    np.testing.assert_allclose(ds.images[0], 128 / 255, atol=1e-6)


def test_image_folder_errors(tmp_path):
    (tmp_path / "f" / "empty_class").mkdir(parents=True)
    with pytest.raises(IntegrityError):
        load_image_folder(tmp_path / "f")
    bad = tmp_path / "g" / "c"
    bad.mkdir(parents=True)
    (bad / "x.jpg").write_bytes(b"garbage")
    with pytest.raises(IngestionError, match="x.jpg"):
        load_image_folder(tmp_path / "g")


def test_dataset_rejects_mixed_shapes():
    with pytest.raises(IntegrityError):
        Dataset([np.zeros((2, 1, 4, 4)), np.zeros((2, 1, 5, 5))])


# ---------------------------------------------------------------- splitting

def test_omniglot_sized_split_has_423_test_classes():
    split = make_split(tiny_dataset(1623), 1140, 60, seed=0)
    assert len(split.train) == 1140 and len(split.validation) == 60
    assert split.test == tuple(range(1200, 1623))
    assert set(split.train) | set(split.validation) == set(range(1200))


def test_split_determinism_and_empty_validation():
    ds = tiny_dataset(100)
    assert make_split(ds, 64, 16, seed=3) == make_split(ds, 64, 16, seed=3)
    assert make_split(ds, 64, 16, seed=3) != make_split(ds, 64, 16, seed=4)
    assert make_split(ds, 80, 0).validation == ()


def test_split_errors_and_disjointness(tmp_path):
    with pytest.raises(ValueError):
        make_split(tiny_dataset(10), 8, 3)
    with pytest.raises(IntegrityError):
        ClassSplit((0, 1), (1,), ())
    split = make_split(tiny_dataset(30), 20, 5, seed=1)
    split.save(tmp_path / "split.json")
    assert ClassSplit.load(tmp_path / "split.json") == split


# ---------------------------------------------------------------- augmentation

def test_augment_identity():
    img = np.random.default_rng(0).random((1, 28, 28)).astype(np.float32)
    np.testing.assert_array_equal(augment(img), img)


def test_shift_moves_a_lit_pixel():
    img = np.zeros((1, 28, 28), np.float32)
    img[0, 10, 5] = 1.0
    out = augment(img, dx=6)
    assert out[0, 10, 11] == 1.0 and out.sum() == 1.0
    out = augment(img, dy=-6)
    assert out[0, 4, 5] == 1.0


def test_shift_composes_additively():
    img = np.zeros((1, 28, 28), np.float32)
    img[0, 12:15, 12:15] = 0.7
    np.testing.assert_array_equal(augment(augment(img, dx=2, dy=-1), dx=3, dy=-2),
                                  augment(img, dx=5, dy=-3))


def test_rotation_round_trip_of_centred_disc():
    yy, xx = np.mgrid[0:28, 0:28] - 13.5
    disc = np.clip(7.5 - np.hypot(yy, xx), 0, 1).astype(np.float32)[None]
    back = augment(augment(disc, 45), -45)
    assert np.abs(back - disc).mean() <= 0.02


def test_augment_range_errors_and_bounds():
    img = np.ones((1, 8, 8), np.float32)
    for kwargs in ({"rotation_deg": 46}, {"dx": 7}, {"dy": -7}, {"dx": 1.5}):
        with pytest.raises(ValueError):
            augment(img, **kwargs)
    batch = np.random.default_rng(1).random((16, 1, 8, 8)).astype(np.float32)
    out = random_augment(batch, np.random.default_rng(2))
    assert out.shape == batch.shape and out.min() >= 0 and out.max() <= 1


# ---------------------------------------------------------------- pair sampling

def test_pair_batch_balance_and_structure():
    ds = synthetic_glyphs(num_classes=6, per_class=5, size=12)
    rng = np.random.default_rng(0)
    for bs in (2, 3, 128, 129):
        b = sample_pair_batch(ds, range(6), bs, rng)
        assert abs(int(b.y.sum()) - int((1 - b.y).sum())) <= 1
        assert np.all((b.class_x == b.class_t) == (b.y == 1))
    b = sample_pair_batch(ds, range(6), 128, rng)
    assert int(b.y.sum()) == 64 and len(b) == 128
    same = b.y == 1
    assert not np.any(np.all(b.x[same] == b.x_t[same], axis=(1, 2, 3)))


def test_pair_conditioning_class_is_uniform():
    ds = tiny_dataset(5, per_class=3)
    rng = np.random.default_rng(7)
    counts = np.zeros(5)
    for _ in range(10_000 // 100):
        b = sample_pair_batch(ds, range(5), 100, rng)
        counts += np.bincount(b.class_t, minlength=5)
    freq = counts / counts.sum()
    assert np.all(np.abs(freq - 0.2) <= 0.02)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_pairs_never_leave_the_split_part():
    ds = tiny_dataset(30)
    split = make_split(ds, 20, 5, seed=0)
    rng = np.random.default_rng(0)
    for _ in range(50):
        b = sample_pair_batch(ds, split.train, 32, rng)
        assert set(b.class_x) | set(b.class_t) <= set(split.train)


def test_pair_sampling_errors_and_determinism():
    ds = tiny_dataset(3)
    with pytest.raises(SamplingError):
        sample_pair_batch(ds, [0], 4, np.random.default_rng())
    with pytest.raises(SamplingError):
        sample_pair_batch(ds, [0, 1], 1, np.random.default_rng())
    with pytest.raises(SamplingError):
        sample_pair_batch(tiny_dataset(3, per_class=1), [0, 1], 4, np.random.default_rng())
    glyphs = synthetic_glyphs(num_classes=4, per_class=4, size=8)
    a = sample_pair_batch(glyphs, range(4), 16, np.random.default_rng(5))
    b = sample_pair_batch(glyphs, range(4), 16, np.random.default_rng(5))
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)


# ---------------------------------------------------------------- episodes

def test_episode_20_way_one_shot():
    ds = synthetic_glyphs(num_classes=25, per_class=20, size=8)
    ep = sample_episode(ds, range(25), 20, 1, 20, np.random.default_rng(0))
    assert ep.support.shape == (20, 1, 8, 8) and ep.queries.shape == (20, 1, 8, 8)
    assert len(ep.classes) == 20
    assert set(ep.query_labels) <= set(ep.support_labels)


def test_one_way_episode():
    ds = synthetic_glyphs(num_classes=3, per_class=5, size=8)
    ep = sample_episode(ds, [2], 1, 2, 10, np.random.default_rng(0))
    assert np.all(ep.query_labels == 2)
    assert np.all(ep.support_labels == 2) and len(ep.support) == 2


def test_support_query_disjoint_over_1000_episodes():
    ds = tiny_dataset(12, per_class=6)
    rng = np.random.default_rng(11)
    for _ in range(1000):
        ep = sample_episode(ds, range(12), 5, 2, 8, rng)
        assert not set(ep.support_index) & set(ep.query_index)
        assert sorted(np.unique(ep.support_labels, return_counts=True)[1]) == [2] * 5


def test_episode_errors_and_determinism():
    ds = tiny_dataset(4, per_class=2)
    with pytest.raises(SamplingError):
        sample_episode(ds, range(4), 5, 1, 1, np.random.default_rng())
    with pytest.raises(SamplingError):
        sample_episode(ds, range(4), 2, 2, 1, np.random.default_rng())
    glyphs = synthetic_glyphs(num_classes=6, per_class=4, size=8)
    a = sample_episode(glyphs, range(6), 3, 1, 5, np.random.default_rng(9))
    b = sample_episode(glyphs, range(6), 3, 1, 5, np.random.default_rng(9))
    assert a.support_index == b.support_index and a.query_index == b.query_index


def test_synthetic_blobs_are_two_offset_classes():
    ds = synthetic_blobs(per_class=16, size=8)
    assert ds.num_classes == 2 and ds.image_shape == (1, 8, 8)
    com = [np.array(np.unravel_index(ds.images[c].mean(0)[0].argmax(), (8, 8)))
           for c in range(2)]
    assert np.all(com[0] < com[1])
    same = synthetic_blobs(per_class=4, jitter=0.0)
    np.testing.assert_array_equal(same.images[0][0], same.images[0][3])
