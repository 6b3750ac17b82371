import numpy as np
import numpy.testing as npt
import pytest

from transnorm.data import (
    SynthSpec,
    generate,
    generate_sample,
    load_dataset,
    read_image,
    read_pgm,
    save_dataset,
    split,
    split_indices,
    write_pgm,
)
from transnorm.errors import ConfigError, FormatError


# ---------------------------------------------------------------- generator


def test_generation_is_bitwise_deterministic():
    spec = SynthSpec(count=6, size=32, seed=11)
    a, b = generate(spec), generate(spec)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.masks.tobytes() == b.masks.tobytes()


def test_samples_are_independent_of_count():
    small = generate(SynthSpec(count=3, size=32, seed=5))
    large = generate(SynthSpec(count=8, size=32, seed=5))
    npt.assert_array_equal(small.images, large.images[:3])
    npt.assert_array_equal(generate_sample(SynthSpec(count=8, size=32, seed=5), 6).mask, large.masks[6])


def test_different_seeds_differ():
    a = generate(SynthSpec(count=2, size=32, seed=0))
    b = generate(SynthSpec(count=2, size=32, seed=1))
    assert not np.array_equal(a.masks, b.masks)


def test_noiseless_full_contrast_is_thresholdable():
    ds = generate(SynthSpec(count=20, size=32, noise_std=0.0, contrast=1.0, num_classes=3, seed=2))
    npt.assert_array_equal(ds.images[:, 0] > 0.4, ds.masks > 0)


def test_foreground_fraction_band():
    ds = generate(SynthSpec(count=100, size=32, seed=3))
    frac = (ds.masks > 0).mean(axis=(1, 2))
    assert frac.min() >= 0.05 and frac.max() <= 0.60


def test_generated_values_and_ids():
    ds = generate(SynthSpec(count=10, size=32, num_classes=4, channels=3, seed=4))
    assert ds.images.shape == (10, 3, 32, 32)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert ds.masks.min() >= 0 and ds.masks.max() < 4
    assert np.all((ds.masks > 0).sum(axis=(1, 2)) >= 1)


def test_no_overlap_keeps_shapes_apart():
    spec = SynthSpec(count=10, size=32, num_classes=4, overlap=False, shapes=("ellipse",), seed=6)
    ds = generate(spec)
    assert np.all((ds.masks > 0).mean(axis=(1, 2)) >= 0.05)


@pytest.mark.parametrize(
    "kwargs",
    [{"num_classes": 0}, {"num_classes": 1}, {"size": 8}, {"shapes": ("hexagon",)}, {"channels": 2}],
)
def test_impossible_spec(kwargs):
    with pytest.raises(ConfigError):
        SynthSpec(**kwargs)


def test_spec_dict_round_trip():
    spec = SynthSpec(count=3, shapes=("ring",), fg_range=(0.1, 0.5))
    assert SynthSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigError, match="unknown"):
        SynthSpec.from_dict({"colour": 1})


# ---------------------------------------------------------------- PGM


def test_pgm_byte_layout(tmp_path):
    path = tmp_path / "a.pgm"
    write_pgm(path, np.array([[0, 64], [128, 255]]))
    raw = path.read_bytes()
    assert raw[:11] == b"P5\n2 2\n255\n"
    assert raw[11:] == bytes([0, 64, 128, 255])
    assert len(raw) == 15


def test_pgm_round_trip_bitwise(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(13, 7), dtype=np.uint8)
    write_pgm(tmp_path / "b.pgm", img)
    out = read_pgm(tmp_path / "b.pgm")
    assert out.dtype == np.uint8
    npt.assert_array_equal(out, img)


def test_pgm_header_comments(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
    npt.assert_array_equal(read_pgm(path), [[1, 2]])


def test_pgm_rejects_ascii(tmp_path):
    path = tmp_path / "d.pgm"
    path.write_bytes(b"P2\n2 1\n255\n1 2\n")
    with pytest.raises(FormatError, match="P2"):
        read_pgm(path)


def test_pgm_rejects_maxval(tmp_path):
    path = tmp_path / "e.pgm"
    path.write_bytes(b"P5\n2 1\n65535\n\x00\x00\x00\x00")
    with pytest.raises(FormatError, match="maxval 65535 at byte offset 7"):
        read_pgm(path)


def test_pgm_rejects_truncated_data(tmp_path):
    path = tmp_path / "f.pgm"
    path.write_bytes(b"P5\n4 4\n255\n" + bytes(10))
    with pytest.raises(FormatError, match="expected 16 pixel bytes from byte offset 11, found 10"):
        read_pgm(path)


def test_pgm_rejects_bad_header(tmp_path):
    path = tmp_path / "g.pgm"
    path.write_bytes(b"P5\nxx 1\n255\n\x00")
    with pytest.raises(FormatError, match="byte offset 3"):
        read_pgm(path)
    path.write_bytes(b"P5\n2")
    with pytest.raises(FormatError, match="missing height"):
        read_pgm(path)


def test_write_pgm_rejects_out_of_range(tmp_path):
    with pytest.raises(FormatError):
        write_pgm(tmp_path / "h.pgm", np.array([[256]]))
    with pytest.raises(FormatError):
        write_pgm(tmp_path / "h.pgm", np.zeros((2, 2, 2)))


# ---------------------------------------------------------------- split


def test_split_is_partition():
    train, val, test = split_indices(50, (0.6, 0.2, 0.2), seed=3)
    both = np.concatenate([train, val, test])
    npt.assert_array_equal(np.sort(both), np.arange(50))
    assert (len(train), len(val), len(test)) == (30, 10, 10)


def test_split_all_train():
    ds = generate(SynthSpec(count=5, size=16))
    train, val, test = split(ds, (1.0, 0.0, 0.0))
    assert len(train) == 5 and len(val) == 0 and len(test) == 0


def test_split_deterministic():
    a = split_indices(40, (0.5, 0.25, 0.25), seed=9)
    b = split_indices(40, (0.5, 0.25, 0.25), seed=9)
    for x, y in zip(a, b):
        npt.assert_array_equal(x, y)


@pytest.mark.parametrize("fractions", [(0.5, 0.5, 0.1), (1.0, 0.0), (0.9, 0.05, 0.05)])
def test_split_errors(fractions):
    with pytest.raises(ConfigError):
        split_indices(5, fractions)


# ---------------------------------------------------------------- directories


def test_dataset_directory_round_trip(tmp_path):
    ds = generate(SynthSpec(count=4, size=16, seed=1))
    parts = dict(zip(("train", "val", "test"), split_indices(4, (0.5, 0.25, 0.25))))
    save_dataset(tmp_path, ds, parts)
    assert (tmp_path / "images" / "00003.pgm").exists()
    loaded, splits = load_dataset(tmp_path)
    assert loaded.images.tobytes() == ds.images.tobytes()
    npt.assert_array_equal(loaded.masks, ds.masks)
    npt.assert_array_equal(splits["val"], parts["val"])


def test_colour_planes(tmp_path):
    ds = generate(SynthSpec(count=2, size=16, channels=3, seed=1))
    save_dataset(tmp_path, ds)
    assert (tmp_path / "images" / "00000_g.pgm").exists()
    npt.assert_array_equal(read_image(tmp_path / "images" / "00001.pgm"), ds.images[1])


def test_missing_manifest(tmp_path):
    with pytest.raises(FormatError, match="manifest"):
        load_dataset(tmp_path)
