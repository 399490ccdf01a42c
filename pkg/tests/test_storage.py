import numpy as np
import pytest

import storage
from services.errors import DataError, StorageError


def test_pgm_header_comments_are_skipped(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# scanner export\n2 1\n# max\n255\n" + bytes([0, 200]))
    pixels, maxval = storage.read_pgm(path)
    assert maxval == 255
    assert pixels.tolist() == [[0, 200]]


def test_pgm_16_bit_is_big_endian(tmp_path):
    path = tmp_path / "w.pgm"
    path.write_bytes(b"P5 1 1 65535\n" + bytes([0x01, 0x02]))
    pixels, _ = storage.read_pgm(path)
    assert pixels[0, 0] == 0x0102


def test_pgm_write_then_read(tmp_path):
    values = np.arange(12).reshape(3, 4) * 20
    pixels, maxval = storage.read_pgm(storage.write_pgm(tmp_path / "x.pgm", values))
    assert maxval == 255
    assert np.array_equal(pixels, values)


def test_pgm_truncated_raster(tmp_path):
    """negative, header promises 4 pixels, file has 2"""
    path = tmp_path / "t.pgm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes(2))
    with pytest.raises(DataError, match="truncated"):
        storage.read_pgm(path)


def test_ascii_pgm_rejected(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P2\n1 1\n255\n7\n")
    with pytest.raises(DataError):
        storage.read_pgm(path)


def test_missing_pgm_is_storage_error(tmp_path):
    with pytest.raises(StorageError):
        storage.read_pgm(tmp_path / "none.pgm")


def test_json_is_sorted_and_newline_terminated(tmp_path):
    path = storage.write_json(tmp_path / "m.json", {"b": 1, "a": 0.1})
    text = path.read_text()
    assert text.index('"a"') < text.index('"b"')
    assert text.endswith("\n")
    assert storage.read_json(path) == {"a": 0.1, "b": 1}


def test_invalid_json_is_data_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(DataError):
        storage.read_json(path)


def test_csv_floats_round_trip(tmp_path):
    value = 1.0 / 3.0
    storage.write_csv(tmp_path / "r.csv", ["threshold", "x"], [(float("inf"), value)])
    header, rows = storage.read_csv(tmp_path / "r.csv")
    assert header == ["threshold", "x"]
    assert rows[0][0] == "inf"
    assert float(rows[0][1]) == value


def test_checkpoint_container(tmp_path):
    arrays = [np.arange(6.0).reshape(2, 3), np.array([np.pi])]
    path = storage.write_checkpoint(tmp_path / "c.chpv", {"k": 1}, arrays)
    header, loaded = storage.read_checkpoint(path)
    assert header == {"k": 1}
    assert all(np.array_equal(a, b) for a, b in zip(arrays, loaded))


def test_checkpoint_trailing_bytes(tmp_path):
    """negative, extra data after the last tensor"""
    path = storage.write_checkpoint(tmp_path / "c.chpv", {}, [np.zeros(2)])
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(StorageError):
        storage.read_checkpoint(path)
