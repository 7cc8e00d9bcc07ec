import hashlib
import json
import struct

import numpy as np
import pytest
from conftest import digest

from mmoe.archive import (BadMagicError, ChecksumError, MissingBlobError, UnsupportedVersionError, dumps,
                          load_model, loads, save_model)
from mmoe.gating import GatingConfig, predict_batch
from mmoe.training import build_and_train
from mmoe.partition import SuperclassMap


def reseal(body: bytes) -> bytes:
    return body + hashlib.sha256(body).digest()


def edit_meta(raw: bytes, fn) -> bytes:
    body = raw[:-32]
    version, size, n = struct.unpack("<III", body[4:16])
    meta = json.loads(body[16:16 + n])
    fn(meta)
    new = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    return reseal(body[:4] + struct.pack("<III", version, size, len(new)) + new + body[16 + n:])


@pytest.fixture(scope="module")
def shared_ensemble(synth_split, synth_cfg, fast_train):
    return build_and_train(synth_cfg.with_(shared_layers=1), SuperclassMap.contiguous([3, 3]),
                           synth_split[0], fast_train, GatingConfig(3.5, 0.55))


def test_round_trip_bit_exact(tmp_path, synth_ensemble):
    path = tmp_path / "m.mmoe"
    save_model(synth_ensemble, path)
    back = load_model(path)
    assert digest(back.mediator) == digest(synth_ensemble.mediator)
    for a, b in zip(back.experts, synth_ensemble.experts):
        assert digest(a.net) == digest(b.net) and digest(a.head) == digest(b.head)
        assert a.net.frozen == b.net.frozen and a.local_to_global == b.local_to_global
    assert back.partition == synth_ensemble.partition and back.gating == synth_ensemble.gating
    assert back.config == synth_ensemble.config


def test_save_load_save_idempotent(tmp_path, shared_ensemble):
    first = dumps(shared_ensemble)
    assert dumps(loads(first)) == first


def test_predictions_bit_equal(synth_ensemble, synth_split):
    x = synth_split[1].images[:50]
    a = predict_batch(synth_ensemble, x)
    b = predict_batch(loads(dumps(synth_ensemble)), x)
    assert a.probs.tobytes() == b.probs.tobytes() and a.scores.tobytes() == b.scores.tobytes()


def test_shared_prefix_relinked(shared_ensemble):
    back = loads(dumps(shared_ensemble))
    assert back.config.shared_layers == 1
    for e in back.experts:
        assert e.net.params[0] is back.mediator.params[0] and e.net.frozen[0]
    assert back.mediator.frozen[0]


def test_shared_prefix_stored_once(shared_ensemble):
    raw = dumps(shared_ensemble)
    n = struct.unpack("<I", raw[12:16])[0]
    names = [b["name"] for b in json.loads(raw[16:16 + n])["blobs"]]
    assert "shared/L0/W" in names and not any(n.endswith("/L0/W") and not n.startswith("shared") for n in names)


def test_widening_load(synth_ensemble):
    back = loads(dumps(synth_ensemble), dtype=np.float64)
    assert back.mediator.params[0]["W"].dtype == np.float64
    np.testing.assert_array_equal(back.mediator.params[0]["W"], synth_ensemble.mediator.params[0]["W"])


def test_header_layout(synth_ensemble):
    raw = dumps(synth_ensemble)
    assert raw[:4] == b"MMOE"
    assert struct.unpack("<II", raw[4:12]) == (1, 4)


def test_flipped_byte(synth_ensemble):
    raw = bytearray(dumps(synth_ensemble))
    raw[-100] ^= 0x01
    with pytest.raises(ChecksumError):
        loads(bytes(raw))


def test_bad_magic(synth_ensemble):
    with pytest.raises(BadMagicError):
        loads(b"XXXX" + dumps(synth_ensemble)[4:])


def test_unknown_version(synth_ensemble):
    body = bytearray(dumps(synth_ensemble)[:-32])
    body[4:8] = struct.pack("<I", 2)
    with pytest.raises(UnsupportedVersionError):
        loads(reseal(bytes(body)))


def test_missing_blob(synth_ensemble):
    raw = edit_meta(dumps(synth_ensemble), lambda m: m["blobs"].pop())
    with pytest.raises(MissingBlobError):
        loads(raw)
