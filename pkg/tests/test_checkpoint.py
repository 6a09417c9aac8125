import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consolidate.checkpoint import (Checkpoint, Entry, Manifest, checkpoint_bytes, parse_checkpoint,
                                    read_checkpoint, validate_compatible, write_checkpoint)
from consolidate.errors import (HeaderError, IncompatibleError, LengthMismatchError, MagicError,
                                TruncationError, ValidationError, VersionError)
from consolidate.testbed import mlp

from conftest import random_checkpoint, toy_manifest


@pytest.fixture
def ckpt():
    return random_checkpoint(toy_manifest([(4, 3), (5, 4), (2, 5)]), seed=0, tag="three-layer")


def test_roundtrip(tmp_path, ckpt):
    path = tmp_path / "m.mrgf"
    write_checkpoint(ckpt, path)
    back = read_checkpoint(path)
    assert back == ckpt
    for name in ckpt.tensors:
        assert back.tensors[name].tobytes() == ckpt.tensors[name].tobytes()


def test_rewrite_is_byte_identical(tmp_path, ckpt):
    a, b = tmp_path / "a.mrgf", tmp_path / "b.mrgf"
    write_checkpoint(ckpt, a)
    write_checkpoint(ckpt, b)
    assert hashlib.sha256(a.read_bytes()).digest() == hashlib.sha256(b.read_bytes()).digest()


def test_layout(ckpt):
    raw = checkpoint_bytes(ckpt)
    magic, version, hlen = struct.unpack_from("<4sIQ", raw)
    assert magic == b"MRGF" and version == 1
    payload = raw[16 + hlen:]
    assert len(payload) == 4 * sum(t.size for t in ckpt.tensors.values())
    first = ckpt.manifest.entries[0]
    np.testing.assert_array_equal(
        np.frombuffer(payload[:4 * ckpt.tensors[first.name].size], "<f4"), ckpt.tensors[first.name].ravel())


def test_shape_mismatch_writes_nothing(tmp_path, ckpt):
    bad = ckpt.with_tensors({**ckpt.tensors, "l1.weight": np.zeros((3, 4))})
    path = tmp_path / "bad.mrgf"
    with pytest.raises(ValidationError):
        write_checkpoint(bad, path)
    assert not path.exists()
    assert list(tmp_path.iterdir()) == []


def test_bad_magic(ckpt):
    raw = b"XXXX" + checkpoint_bytes(ckpt)[4:]
    with pytest.raises(MagicError) as err:
        parse_checkpoint(raw)
    assert err.value.offset == 0


def test_bad_version(ckpt):
    raw = bytearray(checkpoint_bytes(ckpt))
    raw[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionError) as err:
        parse_checkpoint(bytes(raw))
    assert err.value.offset == 4


def test_truncated_by_one_byte(ckpt):
    raw = checkpoint_bytes(ckpt)
    cut = raw[:-1]
    with pytest.raises(TruncationError) as err:
        parse_checkpoint(cut)
    assert err.value.offset == len(cut)
    assert f"offset {len(cut)}" in str(err.value)


def test_truncated_inside_prefix_and_header(ckpt):
    raw = checkpoint_bytes(ckpt)
    for n in (6, 20):
        with pytest.raises(TruncationError):
            parse_checkpoint(raw[:n])


def test_trailing_bytes(ckpt):
    raw = checkpoint_bytes(ckpt)
    with pytest.raises(LengthMismatchError) as err:
        parse_checkpoint(raw + b"\0\0\0\0")
    assert err.value.offset == len(raw)


def test_corrupt_header(ckpt):
    raw = bytearray(checkpoint_bytes(ckpt))
    raw[16] = ord("!")
    with pytest.raises(HeaderError):
        parse_checkpoint(bytes(raw))


def test_errors_are_distinct():
    kinds = {MagicError, VersionError, TruncationError, LengthMismatchError}
    assert len({k.code for k in kinds}) == len(kinds)


class TestCompatible:
    def test_self(self, ckpt):
        validate_compatible(ckpt, [ckpt])

    def test_missing_bias_named(self, ckpt):
        entries = tuple(e for e in ckpt.manifest.entries if e.name != "l2.bias")
        other = Checkpoint(Manifest(3, entries), {e.name: ckpt.tensors[e.name] for e in entries})
        with pytest.raises(IncompatibleError, match="l2.bias"):
            validate_compatible(ckpt, [other])

    def test_transposed_weight(self, ckpt):
        entries = tuple(Entry(e.name, e.shape[::-1], e.role, e.depth) if e.name == "l1.weight" else e
                        for e in ckpt.manifest.entries)
        other = Checkpoint(Manifest(3, entries), {**ckpt.tensors, "l1.weight": ckpt.tensors["l1.weight"].T})
        with pytest.raises(IncompatibleError, match="l1.weight"):
            validate_compatible(ckpt, [other])

    def test_lowrank_expert_is_compatible(self):
        m = mlp.build_manifest(4, 6, 2, 3)
        base = random_checkpoint(m, 0)
        lr_manifest = mlp.with_lowrank(m, 2, 2.0)
        expert = random_checkpoint(lr_manifest, 1, kind="expert")
        validate_compatible(base, [expert])


def test_manifest_validation():
    with pytest.raises(ValidationError):
        Manifest(2, (Entry("w", (2, 2), "weight", 1), Entry("b", (2,), "bias", 1))).validate()
    with pytest.raises(ValidationError):
        Manifest(1, (Entry("w", (2, 2), "weight", 1), Entry("w", (2,), "bias", 1))).validate()
    with pytest.raises(ValidationError):
        Manifest(1, (Entry("w", (2, 2), "weight", 1), Entry("b", (3,), "bias", 1))).validate()


@st.composite
def checkpoints(draw):
    depth = draw(st.integers(1, 4))
    dims = draw(st.lists(st.integers(1, 6), min_size=depth + 1, max_size=depth + 1))
    shapes = [(dims[i + 1], dims[i]) for i in range(depth)]
    m = toy_manifest(shapes)
    values = st.floats(allow_nan=False, allow_infinity=False, width=32)
    tensors = {e.name: np.array(draw(st.lists(values, min_size=int(np.prod(e.shape)),
                                             max_size=int(np.prod(e.shape)))), dtype=np.float32).reshape(e.shape)
               for e in m.entries}
    kind = draw(st.sampled_from(["base", "expert", "merged", "joint"]))
    return Checkpoint(m, tensors, kind, draw(st.text(max_size=12)))


@settings(max_examples=60)
@given(checkpoints())
def test_roundtrip_property(c):
    raw = checkpoint_bytes(c)
    back = parse_checkpoint(raw)
    assert back == c
    assert checkpoint_bytes(back) == raw
