"""Writers for the CFPD / manifest / PGM on-disk contract.

Implemented from the format description alone, sharing no code with the
consuming engine, so agreement between the two sides is a real
conformance check rather than a tautology.

CFPD layout (little-endian, no padding):

    magic   "CFPD"
    u16     version (1)
    u16     image_id byte length + UTF-8 bytes
    u16     K scales
    per scale: u32 H, u32 W, u32 D, then H*W*D float32 row-major

Manifest: "#cflow-manifest v1 H W masks_available" header, then
tab-separated image_id / split / label / mask-path-or-dash lines.
Masks: binary 8-bit PGM (P5).
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CFPD"
VERSION = 1


class FormatMismatch(Exception):
    """Raised when a written file disagrees with the in-memory arrays."""


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def serialize_pyramid(image_id: str, scales: list[np.ndarray]) -> bytes:
    if not scales:
        raise ValueError("pyramid needs at least one scale")
    ident = image_id.encode("utf-8")
    chunks = [MAGIC, struct.pack("<H", VERSION),
              struct.pack("<H", len(ident)), ident,
              struct.pack("<H", len(scales))]
    for m in scales:
        if m.ndim != 3:
            raise ValueError(f"scale must be (H, W, D), got shape {m.shape}")
        h, w, d = m.shape
        chunks.append(struct.pack("<III", h, w, d))
        chunks.append(np.ascontiguousarray(m, dtype="<f4").tobytes())
    return b"".join(chunks)


def write_pyramid(path: str | Path, image_id: str,
                  scales: list[np.ndarray]) -> None:
    atomic_write_bytes(Path(path), serialize_pyramid(image_id, scales))


def read_pyramid_minimal(path: str | Path) -> tuple[str, list[np.ndarray]]:
    """Standalone CFPD reader used only for write verification."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatMismatch(f"{path}: bad magic {buf[:4]!r}")
    pos = 4
    (version,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    if version != VERSION:
        raise FormatMismatch(f"{path}: version {version}")
    (ident_len,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    image_id = buf[pos:pos + ident_len].decode("utf-8")
    pos += ident_len
    (num_scales,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    scales = []
    for _ in range(num_scales):
        h, w, d = struct.unpack_from("<III", buf, pos)
        pos += 12
        n = h * w * d
        scales.append(np.frombuffer(buf, dtype="<f4", count=n,
                                    offset=pos).reshape(h, w, d).copy())
        pos += 4 * n
    if pos != len(buf):
        raise FormatMismatch(f"{path}: {len(buf) - pos} trailing bytes")
    return image_id, scales


def verify_roundtrip(path: str | Path, image_id: str,
                     scales: list[np.ndarray]) -> bool:
    """Re-read a written pyramid and compare bit-exactly.

    Raises FormatMismatch with the byte offset of the first difference,
    so a broken writer (or a corrupted file) is diagnosable directly.
    """
    expected = serialize_pyramid(image_id, scales)
    actual = Path(path).read_bytes()
    if expected != actual:
        limit = min(len(expected), len(actual))
        offset = next((i for i in range(limit)
                       if expected[i] != actual[i]), limit)
        raise FormatMismatch(
            f"{path}: first difference at byte {offset} "
            f"(expected {len(expected)} bytes, file has {len(actual)})")
    got_id, got_scales = read_pyramid_minimal(path)
    if got_id != image_id or len(got_scales) != len(scales):
        raise FormatMismatch(f"{path}: header fields do not match")
    for k, (a, b) in enumerate(zip(scales, got_scales)):
        a32 = np.ascontiguousarray(a, dtype="<f4")
        if a32.shape != b.shape or not np.array_equal(
                a32.view(np.uint32), b.view(np.uint32)):
            raise FormatMismatch(f"{path}: scale {k} payload differs")
    return True


def write_manifest(path: str | Path, image_size: tuple[int, int],
                   masks_available: bool,
                   entries: list[tuple[str, str, str, str | None]]) -> None:
    """entries: (image_id, split, label, mask_path or None)."""
    lines = [f"#cflow-manifest v1 {image_size[0]} {image_size[1]} "
             f"{'true' if masks_available else 'false'}"]
    for image_id, split, label, mask in entries:
        lines.append(f"{image_id}\t{split}\t{label}\t{mask or '-'}")
    atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode())


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """8-bit binary PGM, nonzero = anomalous."""
    data = np.clip(np.rint(image), 0, 255).astype("u1")
    header = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n"
    atomic_write_bytes(Path(path), header.encode("ascii") + data.tobytes())
