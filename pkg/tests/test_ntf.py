import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from unipert.errors import (
    BadMagicError,
    NonFiniteError,
    RankOutOfRangeError,
    TruncatedFileError,
)
from unipert.ntf import read_ntf, tensor_from_bytes, tensor_to_bytes, write_ntf


def test_round_trip_2x3(tmp_path):
    t = np.arange(6.0).reshape(2, 3)
    path = tmp_path / "t.ntf"
    write_ntf(t, path)
    again = read_ntf(path)
    assert again.tobytes() == t.tobytes()
    assert again.shape == t.shape
    # writing the loaded tensor reproduces the exact bytes
    assert tensor_to_bytes(again) == path.read_bytes()


def test_round_trip_image_batch(tmp_path, rng):
    t = rng.uniform(0, 1, size=(3, 32, 32, 3))
    path = tmp_path / "imgs.ntf"
    write_ntf(t, path)
    assert np.array_equal(read_ntf(path), t)


def test_header_layout():
    blob = tensor_to_bytes(np.zeros((2, 3)))
    assert blob[:4] == b"NTF1"
    assert blob[4] == 2
    assert blob[5:8] == b"\x00\x00\x00"
    assert struct.unpack("<2Q", blob[8:24]) == (2, 3)
    assert len(blob) == 24 + 6 * 8


def test_bad_magic():
    blob = b"XXXX" + tensor_to_bytes(np.zeros(2))[4:]
    with pytest.raises(BadMagicError):
        tensor_from_bytes(blob)


def test_truncated_variants():
    blob = tensor_to_bytes(np.zeros((2, 3)))
    with pytest.raises(TruncatedFileError):
        tensor_from_bytes(blob[:3])
    with pytest.raises(TruncatedFileError):
        tensor_from_bytes(blob[:10])
    with pytest.raises(TruncatedFileError):
        tensor_from_bytes(blob[:-1])
    with pytest.raises(TruncatedFileError):
        tensor_from_bytes(blob + b"\x00")


def test_rank_out_of_range():
    with pytest.raises(RankOutOfRangeError):
        tensor_to_bytes(np.zeros((1, 1, 1, 1, 1)))
    blob = bytearray(tensor_to_bytes(np.zeros((2, 2))))
    blob[4] = 9
    with pytest.raises(RankOutOfRangeError):
        tensor_from_bytes(bytes(blob))


def test_nonfinite_payload_rejected():
    good = tensor_to_bytes(np.zeros(2))
    bad = good[:16] + struct.pack("<2d", 1.0, float("nan"))
    with pytest.raises(NonFiniteError):
        tensor_from_bytes(bad)


def test_loaded_tensor_is_writable(tmp_path):
    path = tmp_path / "w.ntf"
    write_ntf(np.ones(3), path)
    out = read_ntf(path)
    out[0] = 5.0  # must not raise


@given(hnp.arrays(np.float64,
                  st.lists(st.integers(1, 5), min_size=1, max_size=4).map(tuple),
                  elements=st.floats(-1e6, 1e6)))
def test_round_trip_property(arr):
    assert np.array_equal(tensor_from_bytes(tensor_to_bytes(arr)), arr)
