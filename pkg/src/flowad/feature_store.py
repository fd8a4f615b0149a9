"""Binary feature-pyramid files, dataset manifests, and PGM masks.

CFPD pyramid layout (little-endian, no padding):

    magic   "CFPD"
    u16     format version (1)
    u16     image_id byte length, then that many UTF-8 bytes
    u16     K (number of scales)
    per scale:
        u32 H_k, u32 W_k, u32 D_k
        H_k*W_k*D_k float32 values, row-major (h, then w, then channel)

Manifest text format, one record per line:

    #cflow-manifest v1 H W masks_available
    image_id<TAB>split<TAB>label<TAB>mask_path_or_dash

Masks are 8-bit binary PGM (P5), nonzero = anomalous. Features are
float32 on disk and widened to float64 in memory.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ValidationError

PYRAMID_MAGIC = b"CFPD"
PYRAMID_VERSION = 1
MANIFEST_HEADER = "#cflow-manifest v1"


@dataclass
class FeaturePyramid:
    """K per-scale feature maps for one image, each (H_k, W_k, D_k) float64."""

    image_id: str
    scales: list[np.ndarray]

    def __post_init__(self):
        if not self.scales:
            raise ValidationError("pyramid needs at least one scale")
        for k, m in enumerate(self.scales):
            if m.ndim != 3 or min(m.shape) < 1:
                raise ValidationError(f"scale {k} has invalid shape {m.shape}")
        dims = [(m.shape[0], m.shape[1]) for m in self.scales]
        if any(b[0] < a[0] or b[1] < a[1] for a, b in zip(dims, dims[1:])):
            warnings.warn(
                f"pyramid {self.image_id!r}: spatial dims not non-decreasing "
                "with scale index (expected deepest-layer-first ordering)",
                stacklevel=3)

    @property
    def num_scales(self) -> int:
        return len(self.scales)


@dataclass
class ManifestEntry:
    image_id: str
    split: str  # train | test
    label: str  # good | anomalous
    mask_path: str | None = None


@dataclass
class DatasetManifest:
    name: str
    image_size: tuple[int, int]
    masks_available: bool
    entries: list[ManifestEntry] = field(default_factory=list)

    def train_entries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == "train"]

    def test_entries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == "test"]

    def validate(self) -> None:
        for e in self.entries:
            if e.split not in ("train", "test"):
                raise ValidationError(f"{e.image_id}: unknown split {e.split!r}")
            if e.label not in ("good", "anomalous"):
                raise ValidationError(f"{e.image_id}: unknown label {e.label!r}")
            if e.split == "train" and e.label != "good":
                raise ValidationError(
                    f"{e.image_id}: train entries must be anomaly-free")
            if (self.masks_available and e.split == "test"
                    and e.label == "anomalous" and not e.mask_path):
                raise ValidationError(
                    f"{e.image_id}: anomalous test entry lacks a mask while "
                    "masks_available=true")


# ---------------------------------------------------------------------------
# CFPD pyramid files
# ---------------------------------------------------------------------------

def write_pyramid(path: str | Path, pyramid: FeaturePyramid) -> None:
    path = Path(path)
    chunks = [PYRAMID_MAGIC, struct.pack("<H", PYRAMID_VERSION)]
    ident = pyramid.image_id.encode("utf-8")
    if len(ident) > 0xFFFF:
        raise ValidationError("image_id longer than 65535 bytes")
    chunks.append(struct.pack("<H", len(ident)))
    chunks.append(ident)
    chunks.append(struct.pack("<H", pyramid.num_scales))
    for m in pyramid.scales:
        h, w, d = m.shape
        chunks.append(struct.pack("<III", h, w, d))
        chunks.append(np.ascontiguousarray(m, dtype="<f4").tobytes())
    path.write_bytes(b"".join(chunks))


class _Cursor:
    """Byte reader that reports the offset of any truncation."""

    def __init__(self, buf: bytes, path: Path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"{self.path}: truncated at byte {len(self.buf)} "
                f"(needed {self.pos + n})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_pyramid(path: str | Path) -> FeaturePyramid:
    path = Path(path)
    cur = _Cursor(path.read_bytes(), path)
    if cur.take(4) != PYRAMID_MAGIC:
        raise FormatError(f"{path}: bad magic, not a CFPD file")
    version = cur.u16()
    if version != PYRAMID_VERSION:
        raise FormatError(f"{path}: unsupported CFPD version {version}")
    ident_len = cur.u16()
    try:
        image_id = cur.take(ident_len).decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: image_id is not valid UTF-8") from e
    num_scales = cur.u16()
    if num_scales < 1:
        raise FormatError(f"{path}: K must be >= 1, got {num_scales}")
    scales = []
    for k in range(num_scales):
        h, w, d = cur.u32(), cur.u32(), cur.u32()
        if min(h, w, d) < 1:
            raise FormatError(
                f"{path}: scale {k} has zero dimension ({h}x{w}x{d})")
        count = h * w * d
        raw = cur.take(4 * count)
        m = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(h, w, d)
        if not np.all(np.isfinite(m)):
            raise DataError(f"{path}: scale {k} contains non-finite values")
        scales.append(m)
    if cur.pos != len(cur.buf):
        raise FormatError(
            f"{path}: {len(cur.buf) - cur.pos} trailing bytes after payload")
    return FeaturePyramid(image_id=image_id, scales=scales)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def write_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    manifest.validate()
    lines = [f"{MANIFEST_HEADER} {manifest.image_size[0]} "
             f"{manifest.image_size[1]} "
             f"{'true' if manifest.masks_available else 'false'}"]
    for e in manifest.entries:
        lines.append(
            f"{e.image_id}\t{e.split}\t{e.label}\t{e.mask_path or '-'}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text()
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: manifest is not UTF-8 text") from e
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith(MANIFEST_HEADER):
        raise FormatError(f"{path}: missing '{MANIFEST_HEADER}' header")
    head = lines[0].split()
    if len(head) != 5:
        raise FormatError(f"{path}: malformed header line")
    try:
        height, width = int(head[2]), int(head[3])
    except ValueError as e:
        raise FormatError(f"{path}: non-integer image size in header") from e
    if head[4] not in ("true", "false"):
        raise FormatError(f"{path}: masks_available must be true or false")
    if height < 1 or width < 1:
        raise FormatError(f"{path}: image size must be positive")

    entries = []
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split("\t")
        if len(parts) != 4:
            raise FormatError(
                f"{path}:{lineno}: expected 4 tab-separated fields")
        image_id, split, label, mask = parts
        entries.append(ManifestEntry(
            image_id=image_id, split=split, label=label,
            mask_path=None if mask == "-" else mask))

    manifest = DatasetManifest(
        name=path.stem, image_size=(height, width),
        masks_available=(head[4] == "true"), entries=entries)
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# PGM images (8-bit masks, 16-bit score maps)
# ---------------------------------------------------------------------------

def write_pgm(path: str | Path, image: np.ndarray, maxval: int = 255,
              comment: str | None = None) -> None:
    """Write a grayscale PGM (P5). 16-bit samples are big-endian per spec."""
    if image.ndim != 2:
        raise ValidationError(f"PGM image must be 2-D, got shape {image.shape}")
    if maxval not in (255, 65535):
        raise ValidationError("maxval must be 255 or 65535")
    header = "P5\n"
    if comment:
        header += "".join(f"# {line}\n" for line in comment.splitlines())
    header += f"{image.shape[1]} {image.shape[0]}\n{maxval}\n"
    dtype = ">u2" if maxval == 65535 else "u1"
    data = np.clip(np.rint(image), 0, maxval).astype(dtype)
    Path(path).write_bytes(header.encode("ascii") + data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    # header tokens may be separated by whitespace and # comments
    tokens: list[int] = []
    pos = 2
    while len(tokens) < 3:
        if pos >= len(buf):
            raise FormatError(f"{path}: truncated PGM header")
        ch = buf[pos:pos + 1]
        if ch == b"#":
            nl = buf.find(b"\n", pos)
            if nl < 0:
                raise FormatError(f"{path}: unterminated PGM comment")
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(buf) and not buf[end:end + 1].isspace():
                end += 1
            try:
                tokens.append(int(buf[pos:end]))
            except ValueError as e:
                raise FormatError(f"{path}: bad PGM header token") from e
            pos = end
    pos += 1  # single whitespace after maxval
    width, height, maxval = tokens
    if width < 1 or height < 1 or maxval < 1 or maxval > 65535:
        raise FormatError(f"{path}: invalid PGM dimensions/maxval")
    dtype = ">u2" if maxval > 255 else "u1"
    count = width * height
    need = count * (2 if maxval > 255 else 1)
    raw = buf[pos:pos + need]
    if len(raw) != need:
        raise FormatError(f"{path}: truncated PGM payload at byte {len(buf)}")
    return np.frombuffer(raw, dtype=dtype).reshape(height, width).astype(np.int64)
