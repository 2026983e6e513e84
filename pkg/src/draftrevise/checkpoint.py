"""Binary artifact formats: checkpoints, code-map files, and PPM images.

Everything is little-endian and free of compression, so identical state
always serialises to identical bytes.

Checkpoint layout (version 1):
    magic "DRCK" | u32 version | u32 config length | config UTF-8 bytes
    u32 section count, then per section:
        u32 name length | name | u32 array count, then per array:
            u32 name length | name | u32 ndim | u32 dims... | float32 data

Code-map layout (version 1):
    magic "RQCM" | u32 version | u32 H | u32 W | u32 depth | u32 K
    then H*W*depth u32 codes, raster order over positions with the depth
    codes of one position stored consecutively.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .codemap import CodeStackMap

__all__ = [
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "write_code_map",
    "read_code_map",
    "write_ppm",
    "read_ppm",
]

CHECKPOINT_MAGIC = b"DRCK"
CHECKPOINT_VERSION = 1
CODEMAP_MAGIC = b"RQCM"
CODEMAP_VERSION = 1


class CheckpointError(RuntimeError):
    """Corrupt or incompatible serialized artifact."""


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated file")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def save_checkpoint(path: str | Path, config_text: str,
                    sections: dict[str, dict[str, np.ndarray]]) -> None:
    """Write named float32 arrays grouped into sections, plus the config snapshot."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), _pack_str(config_text)]
    parts.append(struct.pack("<I", len(sections)))
    for section_name, arrays in sections.items():
        parts.append(_pack_str(section_name))
        parts.append(struct.pack("<I", len(arrays)))
        for array_name, array in arrays.items():
            arr = np.ascontiguousarray(array, dtype="<f4")
            parts.append(_pack_str(array_name))
            parts.append(struct.pack("<I", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
            parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path):
    """Read a checkpoint; returns (config_text, sections)."""
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    config_text = reader.string()
    sections: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(reader.u32()):
        section_name = reader.string()
        arrays: dict[str, np.ndarray] = {}
        for _ in range(reader.u32()):
            array_name = reader.string()
            ndim = reader.u32()
            shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape)
            arrays[array_name] = data.copy()
        sections[section_name] = arrays
    return config_text, sections


# ---------------------------------------------------------------------------
# code-map files
# ---------------------------------------------------------------------------

def write_code_map(path: str | Path, code_map: CodeStackMap) -> None:
    header = CODEMAP_MAGIC + struct.pack(
        "<5I", CODEMAP_VERSION, code_map.height, code_map.width,
        code_map.depth, code_map.codebook_size,
    )
    body = np.ascontiguousarray(code_map.codes, dtype="<u4").tobytes()
    Path(path).write_bytes(header + body)


def read_code_map(path: str | Path) -> CodeStackMap:
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4) != CODEMAP_MAGIC:
        raise CheckpointError(f"{path}: not a code-map file")
    version, height, width, depth, k = struct.unpack("<5I", reader.take(20))
    if version != CODEMAP_VERSION:
        raise CheckpointError(f"{path}: unsupported code-map version {version}")
    codes = np.frombuffer(reader.take(4 * height * width * depth), dtype="<u4")
    return CodeStackMap(codes.reshape(height, width, depth).astype(np.int64), k)


# ---------------------------------------------------------------------------
# PPM images
# ---------------------------------------------------------------------------

def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """8-bit binary PPM; values are clamped to [0, 1] on export."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("PPM export expects an (H, W, 3) image")
    quantized = np.clip(np.rint(np.clip(image, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + quantized.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if fields[0] != b"P6" or fields[3] != b"255":
        raise ValueError(f"{path}: unsupported PPM variant")
    width, height = int(fields[1]), int(fields[2])
    pos += 1  # single whitespace after the header
    data = np.frombuffer(blob[pos:pos + width * height * 3], dtype=np.uint8)
    return (data.reshape(height, width, 3).astype(np.float32)) / 255.0
