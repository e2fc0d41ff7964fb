import struct

import numpy as np
import pytest

from scatterflow import formats


def sample_entries():
    rng = np.random.default_rng(0)
    return {
        "real": rng.normal(size=(3, 4)),
        "cplx": rng.normal(size=5) + 1j * rng.normal(size=5),
        "bytes": np.arange(7, dtype=np.uint8),
        "scalar": np.array(2.5),
        "empty": np.zeros((0, 3)),
    }


def test_round_trip_is_exact():
    entries = sample_entries()
    back = formats.from_bytes(formats.to_bytes(entries))
    assert list(back) == list(entries)
    for name, arr in entries.items():
        assert back[name].shape == arr.shape
        assert back[name].tobytes() == np.asarray(arr, dtype=back[name].dtype).tobytes()


def test_layout_is_little_endian_and_documented():
    buf = formats.to_bytes({"ab": np.array([1.0, 2.0])})
    assert buf[:4] == b"SCPR"
    assert struct.unpack_from("<II", buf, 4) == (1, 1)
    assert struct.unpack_from("<H", buf, 12) == (2,)
    assert buf[14:16] == b"ab"
    assert struct.unpack_from("<BBI", buf, 16) == (0, 1, 2)
    assert struct.unpack_from("<2d", buf, 22) == (1.0, 2.0)
    assert len(buf) == 38


def test_complex_is_interleaved_pairs():
    buf = formats.to_bytes({"z": np.array([1 + 2j])})
    assert struct.unpack_from("<2d", buf, len(buf) - 16) == (1.0, 2.0)


def test_integers_are_stored_as_float64():
    back = formats.from_bytes(formats.to_bytes({"i": np.array([1, 2, 3])}))
    assert back["i"].dtype == np.float64


@pytest.mark.parametrize("cut", [3, 13, 20, 30])
def test_truncation_is_detected(cut):
    buf = formats.to_bytes(sample_entries())
    with pytest.raises(formats.ContainerError):
        formats.from_bytes(buf[:cut])


def test_bad_magic_version_and_trailing_bytes():
    buf = formats.to_bytes({"a": np.ones(2)})
    with pytest.raises(formats.ContainerError, match="magic"):
        formats.from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(formats.ContainerError, match="version"):
        formats.from_bytes(buf[:4] + struct.pack("<I", 9) + buf[8:])
    with pytest.raises(formats.ContainerError, match="trailing"):
        formats.from_bytes(buf + b"\0")


def test_duplicate_names_are_rejected():
    one = formats.to_bytes({"a": np.ones(1)})
    body = one[12:]
    dup = one[:8] + struct.pack("<I", 2) + body + body
    with pytest.raises(formats.ContainerError, match="duplicate"):
        formats.from_bytes(dup)


def test_unknown_dtype_code():
    buf = bytearray(formats.to_bytes({"a": np.ones(1)}))
    buf[15] = 7
    with pytest.raises(formats.ContainerError, match="dtype"):
        formats.from_bytes(bytes(buf))


def test_json_entry_round_trip():
    obj = {"b": [1, 2.5, None], "a": {"x": "y"}}
    assert formats.read_json_entry(formats.json_entry(obj)) == obj


def test_pgm_constant_at_vmin_is_black(tmp_path):
    path = formats.export_pgm(np.full((4, 5), -1.0), tmp_path / "a.pgm", -1.0, 3.0)
    px, maxval = formats.read_pgm(path)
    assert maxval == 65535 and px.shape == (4, 5)
    assert not np.any(px)


def test_pgm_midpoint(tmp_path):
    path = formats.export_pgm(np.full((2, 2), 1.5), tmp_path / "m.pgm", 1.0, 2.0)
    px, _ = formats.read_pgm(path)
    assert np.all(np.abs(px - 32768) <= 1)


def test_pgm_read_back_matches_quantized_grid(tmp_path):
    grid = np.random.default_rng(1).normal(size=(7, 9))
    path = formats.export_pgm(grid, tmp_path / "r.pgm", -1.0, 1.0)
    px, _ = formats.read_pgm(path)
    np.testing.assert_array_equal(px, formats.quantize(grid, -1.0, 1.0))
    assert path.read_bytes().startswith(b"P5\n9 7\n65535\n")


def test_pgm_rejects_empty_range(tmp_path):
    with pytest.raises(ValueError, match="vmin"):
        formats.export_pgm(np.zeros((2, 2)), tmp_path / "x.pgm", 1.0, 1.0)
