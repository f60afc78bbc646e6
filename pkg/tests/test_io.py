import struct

import numpy as np
import pytest

from radnet.errors import FormatError
from radnet.io import RVOL_MAGIC, decode_volume, encode_volume, read_csv, read_volume, write_csv, write_volume
from radnet.preprocess import Volume


@pytest.mark.parametrize("arr,kind", [
    (np.arange(24, dtype=np.int16).reshape(2, 3, 4) - 12, "hu"),
    (np.linspace(0, 1, 24, dtype=np.float32).reshape(2, 3, 4), "normalized"),
    (np.eye(4, dtype=np.uint8)[None], "mask"),
])
def test_rvol_round_trip(tmp_path, arr, kind):
    v = Volume(arr, (1.5, 0.45, 0.5), kind)
    write_volume(v, tmp_path / "v.rvol")
    back = read_volume(tmp_path / "v.rvol")
    assert back.kind == kind and back.spacing_mm == v.spacing_mm
    assert back.voxels.dtype == arr.dtype and np.array_equal(back.voxels, arr)
    assert encode_volume(back) == (tmp_path / "v.rvol").read_bytes()


def test_rvol_layout():
    buf = encode_volume(Volume(np.zeros((1, 2, 3), dtype=np.int16), (1, 1, 1), "hu"))
    assert buf.startswith(RVOL_MAGIC)
    (hlen,) = struct.unpack_from("<Q", buf, len(RVOL_MAGIC))
    assert len(buf) == len(RVOL_MAGIC) + 8 + hlen + 6 * 2


def test_rvol_errors_carry_offsets():
    good = encode_volume(Volume(np.zeros((1, 2, 2), dtype=np.int16), (1, 1, 1), "hu"))
    with pytest.raises(FormatError) as exc:
        decode_volume(b"XVOL1\n" + good[6:])
    assert exc.value.offset == 0
    with pytest.raises(FormatError) as exc:
        decode_volume(good[:-1])
    assert exc.value.offset == len(good) - 8
    with pytest.raises(FormatError):
        decode_volume(good[:10])


def test_csv_round_trip_and_header_check(tmp_path):
    write_csv(tmp_path / "x.csv", ("a", "b"), [(1, "x"), (2, "y")])
    assert (tmp_path / "x.csv").read_bytes() == b"a,b\n1,x\n2,y\n"
    assert read_csv(tmp_path / "x.csv", ("a", "b")) == [{"a": "1", "b": "x"}, {"a": "2", "b": "y"}]
    with pytest.raises(FormatError):
        read_csv(tmp_path / "x.csv", ("a", "c"))
    (tmp_path / "bad.csv").write_text("a,b\n1\n")
    with pytest.raises(FormatError) as exc:
        read_csv(tmp_path / "bad.csv", ("a", "b"))
    assert exc.value.offset == 2
