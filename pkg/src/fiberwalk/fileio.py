"""Whole-file-atomic writers and the small binary formats used on disk."""
import hashlib
import os
import tempfile
from pathlib import Path

import numpy as np


def write_bytes_atomic(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text_atomic(path, text: str) -> None:
    write_bytes_atomic(path, text.encode("utf-8"))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def f32_blob(arrays) -> bytes:
    """Concatenate arrays as little-endian float32 in the given order."""
    parts = [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays]
    return b"".join(parts)


def split_f32_blob(blob: bytes, shapes) -> list[np.ndarray]:
    flat = np.frombuffer(blob, dtype="<f4")
    out, offset = [], 0
    for shape in shapes:
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        chunk = flat[offset:offset + size]
        if chunk.size != size:
            raise ValueError("weight blob shorter than the manifest declares")
        out.append(chunk.astype(np.float64).reshape(shape))
        offset += size
    if offset != flat.size:
        raise ValueError("weight blob longer than the manifest declares")
    return out


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255, row-major) from a [0, 1] grayscale image."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 1:
        side = int(round(np.sqrt(img.size)))
        if side * side != img.size:
            raise ValueError("flat image length is not a perfect square")
        img = img.reshape(side, side)
    if img.ndim != 2:
        raise ValueError("PGM writer takes a 2-D image")
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    write_bytes_atomic(path, header + data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, idx = [], 0
    while len(fields) < 4:
        while idx < len(raw) and raw[idx : idx + 1].isspace():
            idx += 1
        if raw[idx : idx + 1] == b"#":  # comment line
            idx = raw.index(b"\n", idx) + 1
            continue
        start = idx
        while idx < len(raw) and not raw[idx : idx + 1].isspace():
            idx += 1
        fields.append(raw[start:idx])
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM file")
    width, height, maxval = (int(f) for f in fields[1:])
    idx += 1  # single whitespace after maxval
    pixels = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=idx)
    return pixels.reshape(height, width).astype(np.float64) / float(maxval)


def format_csv(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_csv_cell(v) for v in row))
    return "\n".join(lines) + "\n"


def _csv_cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)
