"""Checkpoints, architecture manifests and the MRGF container format.

MRGF layout (little-endian)::

    b"MRGF" | u32 version=1 | u64 header_len | header JSON | payload

The header is canonical JSON (sorted keys, no whitespace) holding
``manifest``, ``kind``, ``source_tag`` and ``tensor_order``. The payload is
the raw row-major float32 data of every tensor in ``tensor_order`` with no
padding. The same container carries datasets (``kind="dataset"``).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    HeaderError,
    IncompatibleError,
    LengthMismatchError,
    MagicError,
    TruncationError,
    ValidationError,
    VersionError,
)

MAGIC = b"MRGF"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")

WEIGHT_ROLES = ("weight", "head_weight")
BIAS_ROLES = ("bias", "head_bias")
LOWRANK_ROLES = ("lowrank_a", "lowrank_b")
ROLES = WEIGHT_ROLES + BIAS_ROLES + LOWRANK_ROLES
KINDS = ("base", "expert", "merged", "joint")


@dataclass(frozen=True)
class Entry:
    name: str
    shape: tuple[int, ...]
    role: str
    depth: int

    def to_json(self) -> dict:
        return {"name": self.name, "shape": list(self.shape), "role": self.role, "depth": self.depth}


@dataclass(frozen=True)
class Manifest:
    """Ordered tensor entries plus the layer count.

    ``lowrank_alpha`` is the adapter scale numerator: a low-rank pair (b, a)
    of rank r contributes ``lowrank_alpha / r * b @ a`` to its weight.
    """

    layer_count: int
    entries: tuple[Entry, ...]
    lowrank_alpha: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def entry(self, name: str) -> Entry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def dense(self) -> "Manifest":
        """The manifest without low-rank factor entries."""
        return Manifest(self.layer_count, tuple(e for e in self.entries if e.role not in LOWRANK_ROLES))

    @property
    def has_lowrank(self) -> bool:
        return any(e.role in LOWRANK_ROLES for e in self.entries)

    def weight_at(self, depth: int) -> Entry:
        for e in self.entries:
            if e.depth == depth and e.role in WEIGHT_ROLES:
                return e
        raise KeyError(depth)

    def bias_at(self, depth: int) -> Entry:
        for e in self.entries:
            if e.depth == depth and e.role in BIAS_ROLES:
                return e
        raise KeyError(depth)

    def lowrank_at(self, depth: int) -> tuple[Entry, Entry] | None:
        a = b = None
        for e in self.entries:
            if e.depth == depth and e.role == "lowrank_a":
                a = e
            elif e.depth == depth and e.role == "lowrank_b":
                b = e
        return (a, b) if a is not None and b is not None else None

    def validate(self) -> None:
        if self.layer_count < 1:
            raise ValidationError("layer_count must be positive")
        seen = set()
        for e in self.entries:
            if e.name in seen:
                raise ValidationError(f"duplicate tensor name {e.name!r}")
            seen.add(e.name)
            if e.role not in ROLES:
                raise ValidationError(f"{e.name}: unknown role {e.role!r}")
            if not 1 <= e.depth <= self.layer_count:
                raise ValidationError(f"{e.name}: depth {e.depth} outside 1..{self.layer_count}")
            if not e.shape or any(int(d) < 1 for d in e.shape):
                raise ValidationError(f"{e.name}: invalid shape {e.shape}")
        weight_depths = sorted(e.depth for e in self.entries if e.role in WEIGHT_ROLES)
        if weight_depths != list(range(1, self.layer_count + 1)):
            raise ValidationError(f"weight depths {weight_depths} do not cover 1..{self.layer_count}")
        for d in weight_depths:
            w = self.weight_at(d)
            try:
                b = self.bias_at(d)
            except KeyError:
                raise ValidationError(f"{w.name}: no bias at depth {d}") from None
            if len(w.shape) != 2 or b.shape != (w.shape[0],):
                raise ValidationError(f"{b.name}: shape {b.shape} does not match weight {w.shape}")
        for e in self.entries:
            if e.role in LOWRANK_ROLES:
                pair = self.lowrank_at(e.depth)
                if pair is None:
                    raise ValidationError(f"{e.name}: low-rank factor without its partner")
                a, b = pair
                w = self.weight_at(e.depth)
                if len(a.shape) != 2 or len(b.shape) != 2 or b.shape[1] != a.shape[0] \
                        or (b.shape[0], a.shape[1]) != w.shape:
                    raise ValidationError(f"{e.name}: factor shapes {b.shape} x {a.shape} do not match {w.shape}")
        if self.has_lowrank and self.lowrank_alpha is None:
            raise ValidationError("low-rank entries need lowrank_alpha")

    def to_json(self) -> dict:
        out = {"layer_count": self.layer_count, "entries": [e.to_json() for e in self.entries]}
        if self.lowrank_alpha is not None:
            out["lowrank_alpha"] = self.lowrank_alpha
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "Manifest":
        try:
            entries = tuple(
                Entry(str(e["name"]), tuple(int(d) for d in e["shape"]), str(e["role"]), int(e["depth"]))
                for e in obj["entries"]
            )
            alpha = obj.get("lowrank_alpha")
            return cls(int(obj["layer_count"]), entries, None if alpha is None else float(alpha))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed manifest: {exc}") from None


@dataclass(eq=False)
class Checkpoint:
    manifest: Manifest
    tensors: dict[str, np.ndarray]
    kind: str = "base"
    source_tag: str = ""

    def __post_init__(self):
        self.tensors = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in self.tensors.items()}

    def validate(self) -> None:
        self.manifest.validate()
        if self.kind not in KINDS:
            raise ValidationError(f"unknown checkpoint kind {self.kind!r}")
        names = set(self.manifest.names)
        extra = set(self.tensors) - names
        if extra:
            raise ValidationError(f"tensor {sorted(extra)[0]!r} is not in the manifest")
        for e in self.manifest.entries:
            if e.name not in self.tensors:
                raise ValidationError(f"tensor {e.name!r} missing")
            t = self.tensors[e.name]
            if t.shape != e.shape:
                raise ValidationError(f"tensor {e.name!r} has shape {t.shape}, manifest says {e.shape}")
            if not np.all(np.isfinite(t)):
                raise ValidationError(f"tensor {e.name!r} has non-finite values")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.manifest == other.manifest
            and self.kind == other.kind
            and self.source_tag == other.source_tag
            and self.tensors.keys() == other.tensors.keys()
            and all(self.tensors[k].tobytes() == other.tensors[k].tobytes() for k in self.tensors)
        )

    def with_tensors(self, tensors: Mapping[str, np.ndarray], kind: str | None = None,
                     source_tag: str | None = None, manifest: Manifest | None = None) -> "Checkpoint":
        return Checkpoint(
            manifest or self.manifest,
            dict(tensors),
            kind or self.kind,
            self.source_tag if source_tag is None else source_tag,
        )


# -- container -------------------------------------------------------------


def encode(header: dict, arrays: Iterable[tuple[str, np.ndarray]]) -> bytes:
    arrays = list(arrays)
    header = dict(header, tensor_order=[name for name, _ in arrays])
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    parts = [_PREFIX.pack(MAGIC, VERSION, len(blob)), blob]
    for _, arr in arrays:
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(raw: bytes, shapes_of) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse container bytes. ``shapes_of(header)`` maps tensor name -> shape."""
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise MagicError(f"bad magic {raw[:4]!r}", 0)
    if len(raw) < _PREFIX.size:
        raise TruncationError("file ends inside the fixed prefix", len(raw))
    _, version, hlen = _PREFIX.unpack_from(raw, 0)
    if version != VERSION:
        raise VersionError(f"unsupported format version {version}", 4)
    start = _PREFIX.size
    if len(raw) < start + hlen:
        raise TruncationError(f"header of {hlen} bytes exceeds file", len(raw))
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"header is not valid UTF-8 JSON: {exc}", start) from None
    if not isinstance(header, dict) or not isinstance(header.get("tensor_order"), list):
        raise HeaderError("header lacks tensor_order", start)
    offset = start + hlen
    try:
        shapes = shapes_of(header)
    except ValidationError as exc:
        raise HeaderError(str(exc), start) from None
    order = header["tensor_order"]
    if sorted(order) != sorted(shapes) or len(set(order)) != len(order):
        raise LengthMismatchError("tensor_order disagrees with the manifest entries", start)
    tensors = {}
    for name in order:
        shape = tuple(shapes[name])
        nbytes = 4 * int(np.prod(shape))
        if len(raw) < offset + nbytes:
            raise TruncationError(f"payload for {name!r} needs {nbytes} bytes", len(raw))
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset) \
            .reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(raw):
        raise LengthMismatchError(f"{len(raw) - offset} trailing bytes after the manifest's payload", offset)
    return header, tensors


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory and rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(c: Checkpoint) -> bytes:
    c.validate()
    header = {"manifest": c.manifest.to_json(), "kind": c.kind, "source_tag": c.source_tag}
    return encode(header, [(e.name, c.tensors[e.name]) for e in c.manifest.entries])


def write_checkpoint(c: Checkpoint, path) -> None:
    atomic_write_bytes(path, checkpoint_bytes(c))


def _checkpoint_shapes(header: dict) -> dict:
    if "manifest" not in header:
        raise ValidationError("header has no manifest")
    m = Manifest.from_json(header["manifest"])
    return {e.name: e.shape for e in m.entries}


def parse_checkpoint(raw: bytes) -> Checkpoint:
    header, tensors = decode(raw, _checkpoint_shapes)
    c = Checkpoint(Manifest.from_json(header["manifest"]), tensors,
                   header.get("kind", ""), header.get("source_tag", ""))
    c.validate()
    return c


def read_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def validate_compatible(base: Checkpoint, experts: Iterable[Checkpoint]) -> None:
    """Require every expert to share the base's dense architecture.

    Low-rank factor entries are ignored; they only exist on low-rank experts.
    """
    ref = base.manifest.dense()
    ref_entries = {e.name: e for e in ref.entries}
    for i, ex in enumerate(experts):
        other = ex.manifest.dense()
        if other.layer_count != ref.layer_count:
            raise IncompatibleError(f"expert {i}: layer_count {other.layer_count} != {ref.layer_count}")
        other_entries = {e.name: e for e in other.entries}
        for e in ref.entries:
            o = other_entries.get(e.name)
            if o is None:
                raise IncompatibleError(f"expert {i}: tensor {e.name!r} missing")
            if o != e:
                raise IncompatibleError(f"expert {i}: tensor {e.name!r} differs ({o} vs {e})")
        for name in other_entries:
            if name not in ref_entries:
                raise IncompatibleError(f"expert {i}: unexpected tensor {name!r}")
        if [e.name for e in other.entries] != [e.name for e in ref.entries]:
            raise IncompatibleError(f"expert {i}: tensor order differs")
