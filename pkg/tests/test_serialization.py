import struct

import numpy as np
import pytest

from msbdn.params import ParameterStore, init_weights, make_rng
from msbdn.serialization import FormatError, load_tensor, read_checkpoint, save_tensor, write_checkpoint


def test_tensor_byte_layout(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(1, 2, 3)
    path = tmp_path / "t.msbt"
    save_tensor(path, arr)
    raw = path.read_bytes()
    assert raw[:4] == b"MSBT"
    assert struct.unpack("<II", raw[4:12]) == (1, 3)
    assert struct.unpack("<3Q", raw[12:36]) == (1, 2, 3)
    assert raw[36:] == arr.astype("<f4").tobytes()


def test_tensor_round_trip(tmp_path, rng):
    arr = rng.normal(size=(2, 3, 4, 5)).astype(np.float32)
    save_tensor(tmp_path / "x.msbt", arr)
    back = load_tensor(tmp_path / "x.msbt")
    assert back.dtype == np.float32 and back.tobytes() == arr.tobytes()


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.msbt"
    p.write_bytes(b"XXXX" + b"\0" * 20)
    with pytest.raises(FormatError):
        load_tensor(p)


def test_truncated(tmp_path):
    p = tmp_path / "t.msbt"
    save_tensor(p, np.ones((4, 4), np.float32))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(FormatError):
        load_tensor(p)


@pytest.mark.parametrize("with_adam", [True, False])
def test_checkpoint_round_trip(tmp_path, with_adam):
    s = ParameterStore()
    s.add("a.weight", (2, 2, 3, 3))
    s.add("a.bias", (2,))
    init_weights(s, make_rng(0))
    s.entry("a.weight").adam_m[...] = 0.25
    path = tmp_path / "c.msbc"
    write_checkpoint(path, "levels=3\n", s, with_adam=with_adam)
    header, entries, adam = read_checkpoint(path)
    assert header == "levels=3\n"
    assert [n for n, _ in entries] == ["a.weight", "a.bias"]
    assert entries[0][1].tobytes() == s["a.weight"].data.tobytes()
    if with_adam:
        assert np.all(adam["adam_m/a.weight"] == 0.25)
        assert set(adam) == {"adam_m/a.weight", "adam_m/a.bias", "adam_v/a.weight", "adam_v/a.bias"}
    else:
        assert adam is None
