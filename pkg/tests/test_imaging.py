import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from jsnreg.imaging import (
    HOT_LUT,
    ImageFormatError,
    JointImage,
    LossSpectrum,
    SegmentationMask,
    colorize_spectrum,
    parse_identity,
    read_image,
    read_mask,
    read_netpbm,
    render_spectrum,
    write_image,
    write_mask,
    write_netpbm,
)


def test_full_scale_16bit_reads_as_one(tmp_path):
    p = tmp_path / "full.pgm"
    write_netpbm(p, np.full((20, 24), 65535), 65535)
    img = read_image(p, 0.175)
    assert img.shape == (20, 24)
    assert np.all(img.pixels == 1.0)
    assert img.resolution == 0.175


def test_zero_8bit_reads_as_zero(tmp_path):
    p = tmp_path / "zero.png"
    Image.fromarray(np.zeros((16, 16), np.uint8)).save(p)
    assert np.all(read_image(p).pixels == 0.0)


def test_value_51_is_point_two(tmp_path):
    p = tmp_path / "v.pgm"
    write_netpbm(p, np.full((16, 16), 51), 255)
    assert read_image(p).pixels[0, 0] == pytest.approx(0.2, abs=1e-6)


def test_plain_and_binary_agree(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 65536, size=(17, 19))
    write_netpbm(tmp_path / "a.pgm", arr, 65535, plain=True)
    write_netpbm(tmp_path / "b.pgm", arr, 65535)
    a, ma, _ = read_netpbm(tmp_path / "a.pgm")
    b, mb, _ = read_netpbm(tmp_path / "b.pgm")
    assert ma == mb == 65535
    assert np.array_equal(a, arr) and np.array_equal(b, arr)


def test_resolution_embedded_and_overridden(tmp_path):
    p = tmp_path / "r.pgm"
    write_image(p, JointImage(np.full((16, 16), 0.5), 0.15))
    assert read_image(p).resolution == 0.15
    assert read_image(p, 0.2).resolution == 0.2


def test_missing_file_and_multichannel_rejected(tmp_path):
    with pytest.raises(ImageFormatError):
        read_image(tmp_path / "nope.pgm")
    p = tmp_path / "rgb.png"
    Image.fromarray(np.zeros((16, 16, 3), np.uint8)).save(p)
    with pytest.raises(ImageFormatError, match="multi-channel"):
        read_image(p)
    q = tmp_path / "rgb.ppm"
    write_netpbm(q, np.zeros((16, 16, 3), np.int64), 255)
    with pytest.raises(ImageFormatError, match="multi-channel"):
        read_image(q)


def test_garbage_file_rejected(tmp_path):
    p = tmp_path / "junk.png"
    p.write_bytes(b"not an image at all")
    with pytest.raises(ImageFormatError):
        read_image(p)


@pytest.mark.parametrize("pixels, res", [
    (np.zeros((15, 20)), 1.0),
    (np.full((16, 16), 1.5), 1.0),
    (np.full((16, 16), -0.1), 1.0),
    (np.zeros((16, 16)), 0.0),
    (np.zeros(256), 1.0),
])
def test_joint_image_invariants(pixels, res):
    with pytest.raises(ValueError):
        JointImage(pixels, res)


def test_joint_image_is_read_only():
    img = JointImage(np.zeros((16, 16)))
    with pytest.raises(ValueError):
        img.pixels[0, 0] = 1.0


def test_mask_examples(tmp_path):
    arr = np.zeros((16, 16), np.int64)
    arr[8:] = 255
    write_netpbm(tmp_path / "m.pgm", arr, 255)
    m = read_mask(tmp_path / "m.pgm")
    assert np.all(m.labels[:8] == 0) and np.all(m.labels[8:] == 1)
    assert m.upper[0, 0] and m.lower[15, 0]

    write_netpbm(tmp_path / "z.pgm", np.zeros((16, 16), np.int64), 255)
    with pytest.raises(ValueError, match="single-region mask"):
        read_mask(tmp_path / "z.pgm")

    arr3 = arr.copy()
    arr3[4] = 128
    write_netpbm(tmp_path / "t.pgm", arr3, 255)
    with pytest.raises(ValueError, match="not bi-level"):
        read_mask(tmp_path / "t.pgm")


def test_mask_type_invariants():
    with pytest.raises(ValueError):
        SegmentationMask(np.full((4, 4), 2))
    with pytest.raises(ValueError, match="single-region"):
        SegmentationMask(np.ones((4, 4)))
    m = SegmentationMask(np.array([[0, 1]] * 16 * 8).reshape(16, 16))
    with pytest.raises(ValueError):
        m.check_matches(JointImage(np.zeros((17, 16))))


def test_mask_round_trip_exact(tmp_path):
    rng = np.random.default_rng(3)
    lab = rng.integers(0, 2, size=(30, 20)).astype(np.uint8)
    lab[0, 0], lab[0, 1] = 0, 1
    write_mask(tmp_path / "m.pgm", SegmentationMask(lab))
    write_mask(tmp_path / "p.pgm", SegmentationMask(lab), plain=True)
    assert np.array_equal(read_mask(tmp_path / "m.pgm").labels, lab)
    assert np.array_equal(read_mask(tmp_path / "p.pgm").labels, lab)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (16, 18), elements=st.floats(0.0, 1.0)))
def test_16bit_round_trip_within_one_count(tmp_path_factory, px):
    p = tmp_path_factory.mktemp("rt") / "x.pgm"
    write_image(p, JointImage(px, 0.175))
    back = read_image(p)
    assert np.max(np.abs(back.pixels - px)) <= 1.0 / 65535
    assert back.resolution == 0.175


def test_identity_tags():
    d = parse_identity("/data/p001_MCP2_20190305.pgm")
    assert d == {"patient": "p001", "joint": "MCP2", "date": "20190305"}


# ------------------------------------------------------------ heatmaps


def test_zero_spectrum_is_uniform_coldest(tmp_path):
    rgb = colorize_spectrum(LossSpectrum(np.zeros((16, 20))))
    assert rgb.shape == (16, 20, 3)
    assert np.all(rgb == HOT_LUT[0])


def test_single_hot_pixel_is_the_only_hottest():
    v = np.zeros((32, 32))
    v[5, 7] = 3.0
    rgb = colorize_spectrum(LossSpectrum(v))
    hottest = np.all(rgb == HOT_LUT[-1], axis=2)
    assert hottest.sum() == 1 and hottest[5, 7]


def test_percentile_clamp():
    rng = np.random.default_rng(1)
    v = rng.uniform(0, 1, size=(50, 50))
    v[0, 0] = 100.0
    rgb = colorize_spectrum(LossSpectrum(v))
    # values above the 99th percentile all saturate
    top = np.percentile(v, 99)
    assert np.all(np.all(rgb[v >= top] == HOT_LUT[-1], axis=1))


def test_ramp_maps_monotonically():
    ramp = np.tile(np.linspace(0, 1, 64), (16, 1))
    rgb = colorize_spectrum(LossSpectrum(ramp)).astype(int)
    for c in range(3):
        assert np.all(np.diff(rgb[0, :, c]) >= 0)
    assert np.any(np.diff(rgb[0].sum(axis=1)) > 0)


def test_lut_channels_monotone():
    assert np.all(np.diff(HOT_LUT.astype(int), axis=0) >= 0)


def test_render_spectrum_files(tmp_path):
    v = np.random.default_rng(0).uniform(0, 1, size=(18, 22))
    render_spectrum(LossSpectrum(v), tmp_path / "s.ppm")
    render_spectrum(LossSpectrum(v), tmp_path / "s.png")
    arr, maxval, _ = read_netpbm(tmp_path / "s.ppm")
    assert arr.shape == (18, 22, 3) and maxval == 255
    with Image.open(tmp_path / "s.png") as im:
        assert im.size == (22, 18) and im.mode == "RGB"
        assert np.array_equal(np.array(im), arr)


def test_render_spectrum_unwritable(tmp_path):
    with pytest.raises(OSError):
        render_spectrum(LossSpectrum(np.zeros((16, 16))), tmp_path / "missing" / "s.ppm")


def test_spectrum_rejects_negative():
    with pytest.raises(ValueError):
        LossSpectrum(np.full((4, 4), -1.0))
