import numpy as np
import pytest
from PIL import Image

from ashplus.errors import ConfigError, EmptyDatasetError, IngestionError
from ashplus.synthdata import (DEFAULT_FREQUENCY, DomainSpec, default_spec, generate_domain,
                               generate_style_pool, load_dataset, make_shift_suite, save_dataset,
                               shifted_spec)


@pytest.fixture(scope="module")
def calibration_set():
    return generate_domain(default_spec(), 100, seed=11)


def test_same_seed_bitwise_identical():
    a, b = generate_domain(default_spec(), 4, seed=5), generate_domain(default_spec(), 4, seed=5)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)


def test_layout_invariant_across_domains():
    base = default_spec()
    other = shifted_spec(base, 0.8, seed=1, name="other")
    a, b = generate_domain(base, 5, seed=9), generate_domain(other, 5, seed=9)
    assert np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, b.images)


def test_class_shares_within_twenty_percent(calibration_set):
    counts = np.bincount(calibration_set.labels.ravel(), minlength=8)[:8]
    shares = counts / counts.sum()
    target = np.asarray(DEFAULT_FREQUENCY)
    assert np.all(np.abs(shares - target) <= 0.2 * target), shares


def test_minority_class_present_in_most_images(calibration_set):
    rare = int(np.argmin(DEFAULT_FREQUENCY))
    present = np.mean([(lbl == rare).any() for lbl in calibration_set.labels])
    assert present >= 0.95


def test_samples_are_valid(calibration_set):
    assert calibration_set.images.dtype == np.uint8
    assert calibration_set.labels.max() < 8
    x = calibration_set.image_tensor()
    assert x.shape == (100, 3, 64, 64) and float(x.min()) >= 0 and float(x.max()) <= 1


def test_infeasible_frequency_rejected():
    freq = (0.3, 0.3, 0.2, 0.19, 0.009, 0.0005, 0.0003, 0.0002)
    with pytest.raises(ConfigError):
        generate_domain(DomainSpec(class_frequency=freq), 1, seed=0)
    with pytest.raises(ConfigError):
        generate_domain(DomainSpec(class_frequency=(0.5, 0.6) + (0.0,) * 6), 1, seed=0)
    with pytest.raises(ConfigError):
        generate_domain(default_spec(), 0, seed=0)


def test_shift_suite_ten_targets():
    src, targets = make_shift_suite(default_spec(), 10, 1.0, seed=3, n=4)
    assert len(targets) == 10
    assert all(np.array_equal(t.labels, src.labels) for t in targets)


def test_zero_magnitude_targets_identical():
    src, targets = make_shift_suite(default_spec(), 3, 0.0, seed=3, n=4)
    assert all(np.array_equal(t.images, src.images) for t in targets)


def test_shift_distance_monotone():
    src, targets = make_shift_suite(default_spec(), 10, 1.0, seed=4, n=20)
    base = src.images.astype(np.float64)
    dist = [np.mean(np.linalg.norm(t.images.astype(np.float64) - base, axis=-1)) for t in targets]
    assert all(b > a for a, b in zip(dist, dist[1:])), dist


def test_spec_dict_round_trip():
    spec = shifted_spec(default_spec(), 0.5, seed=2, name="x")
    assert DomainSpec.from_dict(spec.to_dict()) == spec


def test_style_pool():
    pool = generate_style_pool(5, size=32, seed=1)
    assert pool.shape == (5, 3, 32, 32) and float(pool.min()) >= 0 and float(pool.max()) <= 1
    assert (generate_style_pool(5, size=32, seed=1) == pool).all()
    with pytest.raises(ConfigError):
        generate_style_pool(0)


def test_save_load_round_trip(tmp_path):
    ds = generate_domain(default_spec(), 3, seed=2)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
    assert back.num_classes == 8 and back.name == ds.name


def test_label_id_out_of_range(tmp_path):
    ds = generate_domain(default_spec(), 2, seed=2)
    root = save_dataset(ds, tmp_path / "d")
    lbl = ds.labels[1].copy()
    lbl[0, 0] = 9
    Image.fromarray(lbl, mode="L").save(root / "labels" / "00001.png")
    with pytest.raises(IngestionError, match="00001.png"):
        load_dataset(root)


def test_missing_pair_names_file(tmp_path):
    root = save_dataset(generate_domain(default_spec(), 2, seed=2), tmp_path / "d")
    (root / "labels" / "00000.png").unlink()
    with pytest.raises(IngestionError, match="00000.png"):
        load_dataset(root)


def test_size_mismatch_names_file(tmp_path):
    root = save_dataset(generate_domain(default_spec(), 2, seed=2), tmp_path / "d")
    Image.fromarray(np.zeros((32, 32), np.uint8), mode="L").save(root / "labels" / "00001.png")
    with pytest.raises(IngestionError, match="00001.png"):
        load_dataset(root)


def test_empty_dataset(tmp_path):
    root = save_dataset(generate_domain(default_spec(), 1, seed=2), tmp_path / "d")
    for p in list((root / "images").glob("*.png")) + list((root / "labels").glob("*.png")):
        p.unlink()
    with pytest.raises(EmptyDatasetError):
        load_dataset(root)
    with pytest.raises(IngestionError):
        load_dataset(tmp_path / "nope")
