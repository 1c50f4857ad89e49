import gzip
import os

import numpy as np
import pytest

from morphlayers import datasets, oracle
from morphlayers.datasets import Op, ScenarioSpec
from morphlayers.image import EDGE
from conftest import brute_morph


@pytest.mark.parametrize("name", datasets.SE_NAMES)
def test_se_shape_and_range(name):
    se = datasets.target_se(name)
    assert se.shape == (7, 7)
    assert se.max() == pytest.approx(0.4) and se.min() == 0.0
    assert se[3, 3] == se.max()


def test_cross3_support():
    se = datasets.target_se("cross3")
    assert np.count_nonzero(se) == 5
    assert np.flatnonzero(se).tolist() == [17, 23, 24, 25, 31]


def test_symmetries():
    for name in ("disk2", "disk3", "diamond3", "cross7", "cross3"):
        se = datasets.target_se(name)
        np.testing.assert_array_equal(np.rot90(se), se)
    assert not np.array_equal(np.rot90(datasets.target_se("complex")), datasets.target_se("complex"))


def test_cone_profile_values():
    # cone 0.4 * (1 - d/(r+1)) rounded to 4 decimals
    cross7 = datasets.target_se("cross7")
    np.testing.assert_array_equal(cross7[3], [0.1, 0.2, 0.3, 0.4, 0.3, 0.2, 0.1])
    disk3 = datasets.target_se("disk3")
    assert disk3[2, 2] == round(0.4 * (1 - np.sqrt(2) / 4), 4)
    assert disk3[0, 0] == 0.0


def test_target_se_is_a_fresh_copy():
    a = datasets.target_se("disk3")
    a[:] = 7
    assert datasets.target_se("disk3").max() == pytest.approx(0.4)
    with pytest.raises(ValueError):
        datasets.target_se("square")


# IDX ---------------------------------------------------------------------------

def test_idx_round_trip_bit_exact(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (1, 28, 28), dtype=np.uint8)
    path = tmp_path / "one.idx"
    datasets.write_idx_images(path, img)
    raw = path.read_bytes()
    assert raw[:16] == bytes.fromhex("00000803" "00000001" "0000001c" "0000001c")
    np.testing.assert_array_equal(datasets.read_idx_images_raw(path), img)
    np.testing.assert_array_equal(datasets.load_idx_images(path), img / 255.0)
    datasets.write_idx_images(tmp_path / "again.idx", datasets.read_idx_images_raw(path))
    assert (tmp_path / "again.idx").read_bytes() == raw


def test_float_images_round_trip_through_bytes(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, (3, 5, 4)) / 255.0
    datasets.write_idx_images(tmp_path / "f.idx", img)
    np.testing.assert_array_equal(datasets.load_idx_images(tmp_path / "f.idx"), img)


def test_labels_round_trip_and_gzip(tmp_path):
    labels = np.arange(10) % 10
    datasets.write_idx_labels(tmp_path / "l.idx", labels)
    gz = tmp_path / "l.idx.gz"
    gz.write_bytes(gzip.compress((tmp_path / "l.idx").read_bytes()))
    np.testing.assert_array_equal(datasets.load_idx_labels(gz), labels)


@pytest.fixture
def idx_file(tmp_path):
    path = tmp_path / "imgs.idx"
    datasets.write_idx_images(path, np.zeros((2, 3, 3), dtype=np.uint8))
    return path


def test_truncated_by_one_byte(idx_file):
    idx_file.write_bytes(idx_file.read_bytes()[:-1])
    with pytest.raises(datasets.TruncatedPayloadError):
        datasets.load_idx_images(idx_file)


def test_truncated_header(idx_file):
    idx_file.write_bytes(idx_file.read_bytes()[:10])
    with pytest.raises(datasets.TruncatedPayloadError):
        datasets.load_idx_images(idx_file)


def test_bad_magic(idx_file):
    raw = bytearray(idx_file.read_bytes())
    raw[3] = 0xFF
    idx_file.write_bytes(bytes(raw))
    with pytest.raises(datasets.BadMagicError):
        datasets.load_idx_images(idx_file)
    with pytest.raises(datasets.BadMagicError):
        datasets.load_idx_labels(idx_file)


def test_dimension_mismatch(idx_file):
    idx_file.write_bytes(idx_file.read_bytes() + b"\x00")
    with pytest.raises(datasets.DimensionMismatchError):
        datasets.load_idx_images(idx_file)


def test_errors_are_distinct():
    kinds = {datasets.BadMagicError, datasets.TruncatedPayloadError, datasets.DimensionMismatchError}
    for a in kinds:
        assert issubclass(a, datasets.IdxError)
        assert not any(issubclass(a, b) for b in kinds - {a})


@pytest.mark.skipif(datasets.find_mnist() is None, reason="MNIST_DIR not set")
def test_official_mnist_header():
    images = datasets.read_idx_images_raw(datasets.find_mnist())
    if len(images) != 60000:
        pytest.skip("MNIST_DIR holds a subset, not the official training file")
    assert images.shape == (60000, 28, 28)


def test_find_mnist(tmp_path, monkeypatch):
    monkeypatch.delenv("MNIST_DIR", raising=False)
    assert datasets.find_mnist() is None
    assert datasets.find_mnist(tmp_path) is None
    datasets.write_idx_images(tmp_path / "train-images-idx3-ubyte", np.zeros((3, 28, 28), np.uint8))
    assert datasets.find_mnist(tmp_path) == tmp_path / "train-images-idx3-ubyte"
    monkeypatch.setenv("MNIST_DIR", str(tmp_path))
    assert datasets.load_digits(2).shape == (2, 28, 28)
    with pytest.raises(ValueError):
        datasets.load_digits(5)


# synthetic corpus ---------------------------------------------------------------

def test_synthetic_corpus_deterministic_and_prefix_stable():
    a = datasets.synthetic_corpus(8, seed=3)
    np.testing.assert_array_equal(a, datasets.synthetic_corpus(8, seed=3))
    np.testing.assert_array_equal(a[:4], datasets.synthetic_corpus(4, seed=3))
    assert not np.array_equal(a, datasets.synthetic_corpus(8, seed=4))
    assert a.shape == (8, 28, 28) and a.min() >= 0 and a.max() <= 1
    # values are byte-quantized like IDX data and every image has structure
    np.testing.assert_array_equal(np.round(a * 255) / 255, a)
    assert np.all(a.max(axis=(1, 2)) > a.min(axis=(1, 2)))


def test_load_digits_falls_back_offline(monkeypatch):
    monkeypatch.delenv("MNIST_DIR", raising=False)
    np.testing.assert_array_equal(datasets.load_digits(5), datasets.synthetic_corpus(5))


# pairs ----------------------------------------------------------------------------

def test_op_parsing():
    assert Op.parse("⊕") is Op.DILATION and Op.parse("erode") is Op.EROSION
    assert Op.parse("closing").symbol == "•" and Op.OPENING.depth == 2
    with pytest.raises(ValueError):
        Op.parse("tophat")


def test_scenario_spec_validation():
    spec = ScenarioSpec("⊖", "disk3", "smorph")
    assert spec.op is Op.EROSION and spec.sample_count == 1000
    for bad in [("dilation", "blob", "smorph"), ("dilation", "disk3", "scalebias"),
                ("dilation", "disk3", "conv")]:
        with pytest.raises(ValueError):
            ScenarioSpec(*bad)
    with pytest.raises(ValueError):
        ScenarioSpec("dilation", "disk3", "smorph", sample_count=0)


def test_dilation_of_constant_image():
    images = np.full((1, 10, 10), 0.3)
    _, targets = datasets.make_pairs(images, ScenarioSpec("⊕", "cross3", "smorph", 1))
    np.testing.assert_allclose(targets, 0.3 + 0.4, rtol=0, atol=1e-15)


def test_erosion_uses_negated_se():
    images = np.full((1, 10, 10), 0.3)
    _, targets = datasets.make_pairs(images, ScenarioSpec("⊖", "disk3", "lmorph", 1))
    # min over the window of f + se; se is 0 off its support
    np.testing.assert_allclose(targets, 0.3, atol=1e-15)
    f = np.zeros((1, 9, 9))
    f[0, 4, 4] = -1.0
    _, t = datasets.make_pairs(f, ScenarioSpec("⊖", "cross3", "lmorph", 1))
    assert t[0, 4, 4] == pytest.approx(-0.6) and t[0, 4, 5] == pytest.approx(-0.8)


def test_closing_pairs_match_brute_force():
    images = datasets.synthetic_corpus(2, seed=5, size=16)
    se = datasets.target_se("disk2")
    _, targets = datasets.make_pairs(images, ScenarioSpec("•", "disk2", "smorph", 2))
    for img, t in zip(images, targets):
        ref = brute_morph(brute_morph(img, se, EDGE, dilation=True), se, EDGE, dilation=False)
        np.testing.assert_allclose(t, ref, atol=1e-14)


def test_flat_erode_then_dilate_is_below_original():
    f = datasets.synthetic_corpus(3, seed=2, size=16)
    flat = oracle.flat_kernel(datasets.target_se("disk2") > 0)
    opened = oracle.dilate(oracle.erode(f, flat, oracle.PadMode.clip()), flat, oracle.PadMode.clip())
    assert np.all(opened <= f)


def test_pair_count_and_dimensions():
    images = datasets.synthetic_corpus(10)
    for op in Op:
        x, y = datasets.make_pairs(images, ScenarioSpec(op, "cross7", "pconv", 7))
        assert x.shape == y.shape == (7, 28, 28)
        np.testing.assert_array_equal(x, images[:7])
    with pytest.raises(ValueError):
        datasets.make_pairs(images, ScenarioSpec("⊕", "cross7", "pconv", 11))
