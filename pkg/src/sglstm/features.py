"""Image feature files.

Layout: magic ``b"NYCF"``, u32 version, u32 dimension, then dimension
little-endian float32 values. Features come from any external extractor; this
package only reads and writes the container.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError

MAGIC = b"NYCF"
VERSION = 1
DEFAULT_DIM = 2048
_HEADER = struct.Struct("<4sII")


def write_feature(path, vector, expect_dim=DEFAULT_DIM):
    v = np.asarray(vector, dtype="<f4")
    if v.ndim != 1 or (expect_dim is not None and v.shape[0] != expect_dim):
        raise DimensionError(f"{path}: feature has shape {v.shape}, expected ({expect_dim},)")
    if not np.all(np.isfinite(v)):
        raise DataError(f"{path}: non-finite feature values")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, v.shape[0]))
        f.write(v.tobytes())


def read_feature(path, expect_dim=None):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read feature file {path}: {exc.strerror}") from None
    if len(buf) < _HEADER.size:
        raise DataError(f"{path}: truncated feature header")
    magic, version, dim = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise DataError(f"{path}: not a feature file")
    if version != VERSION:
        raise DataError(f"{path}: unsupported feature file version {version}")
    if len(buf) != _HEADER.size + 4 * dim:
        raise DataError(f"{path}: expected {dim} values, file holds {(len(buf) - _HEADER.size) // 4}")
    if expect_dim is not None and dim != expect_dim:
        raise DimensionError(f"{path}: feature dimension {dim}, expected {expect_dim}")
    return np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).astype(np.float32)


def load_raw_vector(path):
    """Read a vector from ``.npy`` or whitespace-separated text."""
    path = Path(path)
    if path.suffix == ".npy":
        v = np.load(path)
    else:
        try:
            v = np.array(path.read_text().split(), dtype=np.float64)
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from None
    v = np.asarray(v, dtype=np.float64)
    if v.ndim > 1:
        v = np.squeeze(v)
    if v.ndim != 1:
        raise DimensionError(f"{path}: expected a single vector, got shape {v.shape}")
    return v


def pack_directory(src_dir, dst_dir, expect_dim=DEFAULT_DIM):
    """Convert every ``.npy``/``.txt`` vector in ``src_dir`` to a feature file.

    Returns ``(written paths, errors)`` where errors are ``(file, message)``.
    """
    src_dir, dst_dir = Path(src_dir), Path(dst_dir)
    dst_dir.mkdir(parents=True, exist_ok=True)
    written, errors = [], []
    for src in sorted(p for p in src_dir.iterdir() if p.suffix in (".npy", ".txt")):
        dst = dst_dir / (src.stem + ".nycf")
        try:
            write_feature(dst, load_raw_vector(src), expect_dim)
        except (DataError, DimensionError) as exc:
            errors.append((src.name, str(exc)))
            continue
        written.append(dst)
    return written, errors
