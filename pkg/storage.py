"""
Storage module for the CHIP classification pipeline
Handles every file read and write: PGM images, JSON documents, CSV tables
and the binary model checkpoint container.
"""
import csv
import json
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from services.errors import DataError, StorageError

PathLike = Union[str, Path]

ENCODING = "utf-8"

# checkpoint container: magic, u32 version, u32 header length, JSON header,
# u32 tensor count, then per tensor u32 ndim, u32 dims and <f8 values
CHECKPOINT_MAGIC = b"CHPV"
CHECKPOINT_VERSION = 1

PGM_MAGIC = b"P5"
_PGM_WHITESPACE = b" \t\r\n\v\f"


def ensure_dir(path: PathLike) -> Path:
    """Create a directory (and parents) if needed and return it as a Path."""
    directory = Path(path)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"Cannot create directory {directory}: {exc}") from exc
    return directory


def read_json(path: PathLike) -> Dict:
    file = Path(path)
    try:
        text = file.read_text(encoding=ENCODING)
    except FileNotFoundError as exc:
        raise StorageError(f"File not found: {file}") from exc
    except OSError as exc:
        raise StorageError(f"Cannot read {file}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{file} is not valid JSON: {exc}") from exc


def write_json(path: PathLike, payload) -> Path:
    """
    Write JSON with sorted keys so equal payloads give equal bytes.
    Floats use the shortest repr that round-trips exactly.
    """
    file = Path(path)
    text = json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n"
    try:
        file.write_text(text, encoding=ENCODING)
    except OSError as exc:
        raise StorageError(f"Cannot write {file}: {exc}") from exc
    return file


def write_text(path: PathLike, text: str) -> Path:
    file = Path(path)
    try:
        file.write_text(text, encoding=ENCODING)
    except OSError as exc:
        raise StorageError(f"Cannot write {file}: {exc}") from exc
    return file


def format_float(value: float) -> str:
    """Full-precision text form used in CSV files (inf stays 'inf')."""
    return repr(float(value))


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    file = Path(path)
    try:
        with file.open("w", newline="", encoding=ENCODING) as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([format_float(v) if isinstance(v, float) else v for v in row])
    except OSError as exc:
        raise StorageError(f"Cannot write {file}: {exc}") from exc
    return file


def read_csv(path: PathLike) -> Tuple[List[str], List[List[str]]]:
    file = Path(path)
    try:
        with file.open(newline="", encoding=ENCODING) as handle:
            rows = list(csv.reader(handle))
    except OSError as exc:
        raise StorageError(f"Cannot read {file}: {exc}") from exc
    if not rows:
        raise DataError(f"{file} is empty.")
    return rows[0], rows[1:]


#######
def _pgm_tokens(data: bytes, count: int) -> Tuple[List[bytes], int]:
    """Read `count` whitespace separated header tokens, skipping # comments."""
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1] in _PGM_WHITESPACE:
            pos += 1
        if pos >= len(data):
            raise DataError("Truncated PGM header.")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1] not in _PGM_WHITESPACE and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pgm(path: PathLike) -> Tuple[np.ndarray, int]:
    """
    Read a binary (P5) grayscale PGM.

    Returns:
        tuple: (pixels as a [height, width] integer array, maxval)
    """
    file = Path(path)
    try:
        data = file.read_bytes()
    except FileNotFoundError as exc:
        raise StorageError(f"Image file not found: {file}") from exc
    except OSError as exc:
        raise StorageError(f"Cannot read {file}: {exc}") from exc

    magic = data[:2]
    if magic != PGM_MAGIC:
        if magic in (b"P3", b"P6"):
            raise DataError(f"{file} is a color image; only grayscale PGM (P5) is supported.")
        raise DataError(f"{file} is not a binary grayscale PGM (P5) file.")

    tokens, offset = _pgm_tokens(data[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise DataError(f"{file} has a malformed PGM header.") from exc
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise DataError(f"{file} has invalid PGM dimensions or maxval.")

    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    raster = data[2 + offset:]
    expected = width * height * dtype.itemsize
    if len(raster) < expected:
        raise DataError(f"{file} raster is truncated ({len(raster)} of {expected} bytes).")
    pixels = np.frombuffer(raster[:expected], dtype=dtype).reshape(height, width)
    return pixels.astype(np.uint16 if maxval > 255 else np.uint8), maxval


def write_pgm(path: PathLike, pixels: np.ndarray, maxval: int = 255) -> Path:
    """Write a [height, width] integer array as a binary PGM (8 or 16 bit)."""
    file = Path(path)
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise DataError(f"PGM images must be 2D, got shape {arr.shape}.")
    if not 0 < maxval < 65536:
        raise DataError(f"PGM maxval must be in 1..65535, got {maxval}.")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    height, width = arr.shape
    header = b"%s\n%d %d\n%d\n" % (PGM_MAGIC, width, height, maxval)
    try:
        file.write_bytes(header + np.clip(arr, 0, maxval).astype(dtype).tobytes())
    except OSError as exc:
        raise StorageError(f"Cannot write {file}: {exc}") from exc
    return file


#######
def write_checkpoint(path: PathLike, header: Dict, arrays: Sequence[np.ndarray]) -> Path:
    """Serialize a JSON header and a list of float64 arrays into the CHPV container."""
    file = Path(path)
    header_bytes = json.dumps(header, sort_keys=True).encode(ENCODING)
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", len(header_bytes)),
        header_bytes,
        struct.pack("<I", len(arrays)),
    ]
    for arr in arrays:
        values = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", values.ndim))
        parts.append(struct.pack(f"<{values.ndim}I", *values.shape))
        parts.append(values.tobytes())
    try:
        file.write_bytes(b"".join(parts))
    except OSError as exc:
        raise StorageError(f"Cannot write checkpoint {file}: {exc}") from exc
    return file


def read_checkpoint(path: PathLike) -> Tuple[Dict, List[np.ndarray]]:
    file = Path(path)
    try:
        data = file.read_bytes()
    except OSError as exc:
        raise StorageError(f"Cannot read checkpoint {file}: {exc}") from exc

    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise StorageError(f"Checkpoint {file} is truncated.")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise StorageError(f"{file} is not a CHPV checkpoint.")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise StorageError(f"Unsupported checkpoint version {version} in {file}.")
    (header_len,) = struct.unpack("<I", take(4))
    try:
        header = json.loads(take(header_len).decode(ENCODING))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise StorageError(f"Checkpoint {file} has a corrupt header.") from exc
    (count,) = struct.unpack("<I", take(4))
    arrays: List[np.ndarray] = []
    for _ in range(count):
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n_values = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(take(8 * n_values), dtype="<f8").astype(np.float64)
        arrays.append(values.reshape(shape))
    if pos != len(data):
        raise StorageError(f"Checkpoint {file} has trailing bytes.")
    return header, arrays
