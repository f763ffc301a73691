import struct

import numpy as np
import pytest

from concept_probe import prt


def test_round_trip_with_meta():
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    data = prt.dumps(arr, {"source": "x"})
    out, meta = prt.loads(data)
    np.testing.assert_array_equal(out, arr)
    assert meta == {"source": "x"}


def test_layout():
    data = prt.dumps(np.array([[1.0, 2.0]], dtype=np.float32))
    assert data[:4] == b"PRT1"
    (hlen,) = struct.unpack_from("<I", data, 4)
    assert data[8 + hlen :] == struct.pack("<2f", 1.0, 2.0)


@pytest.mark.parametrize("data", [b"PRT2\x00\x00\x00\x00", b"PRT1\xff\x00\x00\x00{}"])
def test_rejects_garbage(data):
    with pytest.raises(prt.PrtError):
        prt.loads(data)


def test_payload_size_checked():
    data = prt.dumps(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(prt.PrtError, match="payload"):
        prt.loads(data[:-4])
