import numpy as np
import pytest

from ucmar.errors import InvalidInput
from ucmar.raster_io import HEADER, read_raster, write_raster


def test_float_round_trip(tmp_path):
    x = np.random.default_rng(0).random((7, 5)).astype(np.float32)
    write_raster(tmp_path / "a.ucmr", x)
    got = read_raster(tmp_path / "a.ucmr")
    assert got.dtype == np.float32
    assert np.array_equal(got, x)


def test_float64_stored_as_float32(tmp_path):
    x = np.random.default_rng(1).random((4, 4))
    write_raster(tmp_path / "a.ucmr", x)
    assert np.array_equal(read_raster(tmp_path / "a.ucmr"), x.astype(np.float32))


def test_mask_round_trip(tmp_path):
    m = np.random.default_rng(2).random((6, 9)) > 0.5
    write_raster(tmp_path / "m.ucmr", m)
    got = read_raster(tmp_path / "m.ucmr")
    assert got.dtype == bool and np.array_equal(got, m)
    assert (tmp_path / "m.ucmr").stat().st_size == HEADER.size + 54


def test_not_2d(tmp_path):
    with pytest.raises(InvalidInput):
        write_raster(tmp_path / "a.ucmr", np.zeros(4))


@pytest.mark.parametrize("damage", ["magic", "truncate", "tag"])
def test_damaged(tmp_path, damage):
    path = tmp_path / "a.ucmr"
    write_raster(path, np.zeros((3, 3), np.float32))
    data = bytearray(path.read_bytes())
    if damage == "magic":
        data[:4] = b"XXXX"
    elif damage == "truncate":
        data = data[:-4]
    else:
        data[12] = 9
    path.write_bytes(bytes(data))
    with pytest.raises(InvalidInput):
        read_raster(path)
