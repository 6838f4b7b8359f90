"""PGM/PPM codec exactness and error reporting; bilinear resize basics."""
import numpy as np
import pytest

from mltr.dataio import (ImageBuffer, decode_netpbm, encode_netpbm, read_image,
                         resize_bilinear, write_image)
from mltr.errors import FormatError


def test_p5_known_bytes():
    blob = b"P5\n2 2\n255\n" + bytes([0, 64, 128, 255])
    img = decode_netpbm(blob)
    assert (img.width, img.height, img.channels) == (2, 2, 1)
    assert np.array_equal(img.pixels, [[0, 64], [128, 255]])


def test_p6_known_bytes():
    blob = b"P6\n1 2\n255\n" + bytes([1, 2, 3, 4, 5, 6])
    img = decode_netpbm(blob)
    assert (img.width, img.height, img.channels) == (1, 2, 3)
    assert np.array_equal(img.pixels, [[[1, 2, 3]], [[4, 5, 6]]])


def test_header_comments_are_skipped():
    blob = b"P5\n# a comment\n2 1\n# another\n255\n" + bytes([9, 7])
    img = decode_netpbm(blob)
    assert np.array_equal(img.pixels, [[9, 7]])


def test_maxval_not_255_rejected_with_offset():
    blob = b"P5\n2 2\n65535\n" + bytes(8)
    with pytest.raises(FormatError, match="byte offset 7"):
        decode_netpbm(blob)


def test_bad_magic_rejected():
    with pytest.raises(FormatError, match="magic"):
        decode_netpbm(b"P3\n1 1\n255\n0")


def test_truncated_raster_reports_offset():
    blob = b"P5\n4 4\n255\n" + bytes(7)
    with pytest.raises(FormatError, match="truncated"):
        decode_netpbm(blob)


def test_non_integer_dimension():
    with pytest.raises(FormatError, match="integer"):
        decode_netpbm(b"P5\nxx 2\n255\n" + bytes(4))


def test_roundtrip_through_disk(tmp_path, rng):
    arr = rng.integers(0, 256, (5, 7)).astype(np.uint8)
    path = tmp_path / "img.pgm"
    write_image(path, ImageBuffer.from_array(arr))
    back = read_image(path)
    assert np.array_equal(back.pixels, arr)
    color = rng.integers(0, 256, (4, 3, 3)).astype(np.uint8)
    path2 = tmp_path / "img.ppm"
    write_image(path2, ImageBuffer.from_array(color))
    assert np.array_equal(read_image(path2).pixels, color)


def test_encode_decode_bytes_identical(rng):
    arr = rng.integers(0, 256, (6, 6)).astype(np.uint8)
    blob = encode_netpbm(ImageBuffer.from_array(arr))
    assert encode_netpbm(decode_netpbm(blob)) == blob


def test_read_image_with_resize(tmp_path, rng):
    arr = rng.integers(0, 256, (10, 14)).astype(np.uint8)
    path = tmp_path / "img.pgm"
    write_image(path, ImageBuffer.from_array(arr))
    img = read_image(path, size=(6, 6))
    assert (img.height, img.width) == (6, 6)


def test_resize_constant_stays_constant():
    img = ImageBuffer.from_array(np.full((7, 9), 133, np.uint8))
    out = resize_bilinear(img, 12, 5)
    assert np.all(out.pixels == 133)


def test_resize_identity_size(rng):
    arr = rng.integers(0, 256, (8, 8)).astype(np.uint8)
    out = resize_bilinear(ImageBuffer.from_array(arr), 8, 8)
    assert np.array_equal(out.pixels, arr)
