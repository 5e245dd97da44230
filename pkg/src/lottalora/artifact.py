"""The distributable artifact: trainable tensors plus the reconstruction
metadata that regenerates every frozen matrix bit-exactly.

Container layout (little-endian throughout, documented in docs/FORMAT.md):

    [magic "LTLR"][version u16][header-len u32][header JSON utf-8]
    [tensor table][payload][crc32 u32]

The header JSON carries the generator tag, the backbone spec (seed,
family, layer shapes), the model config, and free-form extras.  The
tensor table lists name/shape/offset for each payload tensor; the payload
is f32 row-major in canonical parameter order.  The CRC-32 covers every
byte before it.  Backbone matrices are never serialized.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib

import numpy as np

from .errors import FormatError, IncompatibilityError, IntegrityError
from .model import BackboneSpec, Model, ModelConfig, build_model
from .prng import ALGORITHM_ID

MAGIC = b"LTLR"
FORMAT_VERSION = 1


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def pack(model: Model, extra: dict | None = None) -> bytes:
    """Serialize a model's trainable state into the canonical byte stream."""
    header = {
        "algorithm_id": ALGORITHM_ID,
        "backbone": model.spec.to_dict(),
        "model": model.cfg.to_dict(),
        "extra": extra or {},
    }
    header_bytes = _canonical_json(header)

    table = bytearray()
    payload = bytearray()
    tensors = model.state_tensors()
    table += struct.pack("<I", len(tensors))
    for name, t in tensors:
        data = np.asarray(t.data, dtype="<f4")
        if data.ndim and not data.flags.c_contiguous:
            data = np.ascontiguousarray(data)
        raw = data.tobytes()
        encoded = name.encode("utf-8")
        table += struct.pack("<H", len(encoded)) + encoded
        table += struct.pack("<B", data.ndim)
        for dim in data.shape:
            table += struct.pack("<I", dim)
        table += struct.pack("<QQ", len(payload), len(raw))
        payload += raw

    body = MAGIC + struct.pack("<HI", FORMAT_VERSION, len(header_bytes)) + header_bytes + bytes(table) + bytes(payload)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def unpack(blob: bytes) -> tuple[dict, dict]:
    """Validate and decode an artifact into (header, {name: f32 array})."""
    if len(blob) < 14 or blob[:4] != MAGIC:
        raise FormatError(f"not a LTLR artifact (magic {blob[:4]!r})")
    version, header_len = struct.unpack_from("<HI", blob, 4)
    if version != FORMAT_VERSION:
        raise IncompatibilityError(f"artifact format version {version}; this build reads {FORMAT_VERSION}")
    body, crc_bytes = blob[:-4], blob[-4:]
    (stored_crc,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise IntegrityError("artifact checksum mismatch; the file is corrupt")

    pos = 10
    try:
        header = json.loads(blob[pos:pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f"artifact header is not valid JSON: {err}") from err
    pos += header_len

    if header.get("algorithm_id") != ALGORITHM_ID:
        raise IncompatibilityError(
            f"artifact was generated with {header.get('algorithm_id')!r}; this build expects {ALGORITHM_ID!r}"
        )

    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos) if ndim else ()
        pos += 4 * ndim
        offset, nbytes = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        entries.append((name, shape, offset, nbytes))

    payload_start = pos
    tensors = {}
    for name, shape, offset, nbytes in entries:
        start = payload_start + offset
        raw = blob[start:start + nbytes]
        if len(raw) != nbytes:
            raise FormatError(f"payload truncated for tensor {name!r}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        tensors[name] = arr
    return header, tensors


def reconstruct(header: dict, tensors: dict) -> Model:
    """Rebuild the full model: frozen matrices regenerated from the seed,
    trainable tensors restored from the payload."""
    if header.get("algorithm_id") != ALGORITHM_ID:
        raise IncompatibilityError(
            f"artifact was generated with {header.get('algorithm_id')!r}; this build expects {ALGORITHM_ID!r}"
        )
    cfg = ModelConfig.from_dict(header["model"])
    spec = BackboneSpec.from_dict(header["backbone"])
    model = build_model(cfg, spec)
    expected = model.state_tensors()
    if [n for n, _ in expected] != list(tensors):
        raise FormatError("artifact tensor table does not match the declared architecture")
    for name, t in expected:
        arr = tensors[name]
        if tuple(arr.shape) != tuple(t.data.shape):
            raise FormatError(f"tensor {name!r} has shape {arr.shape}, expected {t.data.shape}")
        t.data[...] = arr
    return model


def save(path: str, blob: bytes) -> None:
    """Atomic write via temp file + rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".ltlr.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()
