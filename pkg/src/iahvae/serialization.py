"""Raw tensor files, checkpoints and 16-bit PGM export.

Raw tensor layout::

    b"IAHT" | u8 version | u8 rank | rank x u32 dims | f64 payload | u32 crc32

Checkpoint layout::

    b"IAHK" | u8 version | u32 header length | header (key=value lines)
    | u32 tensor count | per tensor: u16 name length, name, u32 blob length,
    raw tensor blob | u32 crc32

All integers are little-endian.  Checksums cover every preceding byte.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RAW_MAGIC = b"IAHT"
RAW_VERSION = 1
CKPT_MAGIC = b"IAHK"
CKPT_VERSION = 1


class FormatError(ValueError):
    pass


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


def _seal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def _unseal(blob: bytes, what: str) -> bytes:
    if len(blob) < 4:
        raise ChecksumError(f"{what}: file too short")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{what}: checksum mismatch (corrupt or truncated)")
    return body


# ---------------------------------------------------------------------------
# raw tensors


def encode_raw(array) -> bytes:
    a = np.array(array, dtype="<f8", order="C")
    if a.ndim > 255:
        raise FormatError("rank above 255")
    head = RAW_MAGIC + struct.pack("<BB", RAW_VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return _seal(head + a.tobytes())


def decode_raw(blob: bytes) -> np.ndarray:
    if blob[:4] != RAW_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {RAW_MAGIC!r}")
    body = _unseal(blob, "raw tensor")
    if len(body) < 6:
        raise FormatError("raw tensor header truncated")
    version, rank = struct.unpack("<BB", body[4:6])
    if version > RAW_VERSION:
        raise VersionError(f"raw tensor version {version} is newer than supported {RAW_VERSION}")
    end = 6 + 4 * rank
    if len(body) < end:
        raise FormatError("raw tensor header truncated")
    shape = struct.unpack(f"<{rank}I", body[6:end])
    payload = body[end:]
    want = 8 * int(np.prod(shape, dtype=np.int64))
    if len(payload) != want:
        raise FormatError(f"declared shape {shape} needs {want} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def save_raw(array, path) -> None:
    Path(path).write_bytes(encode_raw(array))


def load_raw(path) -> np.ndarray:
    return decode_raw(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    header: dict[str, str]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.header.get("step", "0"))


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    lines = []
    for k, v in ckpt.header.items():
        v = str(v)
        if "\n" in v or "=" in k or "\n" in k:
            raise FormatError(f"header entry {k!r} cannot be encoded on one line")
        lines.append(f"{k}={v}")
    header = ("\n".join(lines) + "\n").encode()
    parts = [CKPT_MAGIC, struct.pack("<BI", CKPT_VERSION, len(header)), header,
             struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        nb = name.encode()
        blob = encode_raw(ckpt.tensors[name])
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<I", len(blob)), blob]
    return _seal(b"".join(parts))


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {CKPT_MAGIC!r}")
    if len(blob) >= 5 and blob[4] > CKPT_VERSION:
        raise VersionError(f"checkpoint version {blob[4]} is newer than supported {CKPT_VERSION}")
    body = _unseal(blob, "checkpoint")
    pos = 4
    try:
        _, hlen = struct.unpack_from("<BI", body, pos)
        pos += 5
        text = body[pos:pos + hlen].decode()
        pos += hlen
        header = {}
        for line in text.splitlines():
            if line:
                k, _, v = line.partition("=")
                header[k] = v
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode()
            pos += nlen
            (blen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            tensors[name] = decode_raw(body[pos:pos + blen])
            pos += blen
    except struct.error as exc:
        raise FormatError(f"checkpoint structure truncated: {exc}") from exc
    if pos != len(body):
        raise FormatError("trailing bytes after checkpoint tensors")
    return Checkpoint(header, tensors)


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def save_checkpoint(model, path, step: int = 0, rng_state: str = "", extra: dict | None = None) -> None:
    """Write parameters, model config, RNG state and step."""
    header = {"format_version": str(CKPT_VERSION), "step": str(int(step)), "rng_state": rng_state}
    for line in model.config.to_lines():
        k, _, v = line.partition("=")
        header[k] = v
    for k, v in (extra or {}).items():
        header[k] = str(v)
    write_checkpoint(Checkpoint(header, model.state()), path)


def load_checkpoint(path):
    """Rebuild a model from a checkpoint file; returns (model, checkpoint)."""
    from .model import Hierarchy, ModelConfig

    ckpt = read_checkpoint(path)
    cfg = {k[len("model."):]: v for k, v in ckpt.header.items() if k.startswith("model.")}
    model = Hierarchy(ModelConfig.from_dict(cfg))
    model.load_state(ckpt.tensors)
    return model, ckpt


# ---------------------------------------------------------------------------
# images


def write_pgm(image, path, lo: float | None = None, hi: float | None = None) -> None:
    """16-bit binary PGM, linearly mapping [lo, hi] (default min/max) to 0..65535."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim != 2:
        raise FormatError(f"PGM needs a 2-D image, got shape {a.shape}")
    lo = float(a.min()) if lo is None else lo
    hi = float(a.max()) if hi is None else hi
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    q = np.clip(np.rint((a - lo) * scale), 0, 65535).astype(">u2")
    h, w = a.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + q.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode())
    pos += 1
    if tokens[0] != "P5":
        raise FormatError(f"not a binary PGM: {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(data[pos:], dtype=dtype, count=w * h).reshape(h, w).astype(np.float64)
