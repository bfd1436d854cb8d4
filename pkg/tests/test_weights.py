import struct

import numpy as np
import pytest

from mfpn.pyramids import FpnConfig
from mfpn.training import init_model
from mfpn.weights import (
    WeightFileError,
    WeightStore,
    decode_tensors,
    encode_tensors,
    load_weights,
    save_weights,
)


def test_round_trip_byte_identical(tmp_path):
    store = init_model(FpnConfig(channels=4, backbone_channels=(2, 3, 4, 5)), "mfpn", 0, 2)
    save_weights(tmp_path / "a.mfpw", store)
    back = load_weights(tmp_path / "a.mfpw")
    assert back.names() == store.names()
    for n in store:
        assert np.array_equal(back[n].data, store[n].data)
    save_weights(tmp_path / "b.mfpw", back)
    assert (tmp_path / "a.mfpw").read_bytes() == (tmp_path / "b.mfpw").read_bytes()


def test_layout_by_hand():
    blob = encode_tensors({"ab": np.array([[1.5, -2.0]])})
    expected = b"MFPW" + struct.pack("<II", 1, 1) + struct.pack("<I", 2) + b"ab" + struct.pack("<I", 2) \
        + struct.pack("<QQ", 1, 2) + struct.pack("<dd", 1.5, -2.0)
    assert blob == expected


def test_unicode_names_and_scalars():
    arrays = {"größe": np.array(3.0), "x": np.zeros((0, 2))}
    back = decode_tensors(encode_tensors(arrays))
    assert back["größe"].shape == () and back["größe"] == 3.0
    assert back["x"].shape == (0, 2)


@pytest.mark.parametrize("mutate,needle", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\0", "trailing"),
])
def test_corrupt_files_rejected(mutate, needle):
    blob = encode_tensors({"w": np.ones((2, 2))})
    with pytest.raises(WeightFileError, match=needle):
        decode_tensors(mutate(blob))


def test_duplicate_entry_rejected():
    one = encode_tensors({"w": np.ones(1)})
    body = one[12:]
    blob = b"MFPW" + struct.pack("<II", 1, 2) + body + body
    with pytest.raises(WeightFileError, match="duplicate"):
        decode_tensors(blob)


def test_store_api():
    store = WeightStore()
    store.add("a.weight", np.ones((2, 2, 1, 1)))
    store.add("a.bias", np.zeros((1, 2, 1, 1)), trainable=False)
    assert len(store) == 2 and "a.weight" in store
    assert store.count() == 6 and store.count("a.b") == 2
    assert [p.name for p in store.trainable()] == ["a.weight"]
    with pytest.raises(KeyError, match="duplicate"):
        store.add("a.weight", np.ones((1, 1, 1, 1)))
    with pytest.raises(KeyError, match="missing weight"):
        store["b.weight"]
    clone = store.copy()
    clone["a.weight"].data[...] = 5.0
    assert store["a.weight"].data.max() == 1.0
