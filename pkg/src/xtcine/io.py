"""File formats: flat key-value configs, a small binary array container,
CSV tables and 16-bit PGM images."""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

MAGIC = b"XTCA"
_REAL, _COMPLEX = 0, 1


def read_kv(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def write_kv(path, values: dict):
    lines = [f"{k} = {v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def write_array(path, arr: np.ndarray, meta: dict[str, float] | None = None):
    """Binary container: magic, kind, ndim, dims (uint64), meta count and
    (name, float64) pairs, then little-endian float64 data (complex stored
    as interleaved real/imag)."""
    arr = np.asarray(arr)
    kind = _COMPLEX if np.iscomplexobj(arr) else _REAL
    meta = meta or {}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", kind, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(struct.pack("<I", len(meta)))
        for name, value in meta.items():
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)) + encoded + struct.pack("<d", float(value)))
        data = arr.astype("<c16" if kind == _COMPLEX else "<f8")
        fh.write(np.ascontiguousarray(data).tobytes())


def read_array(path, with_meta: bool = False):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not an array container")
        kind, ndim = struct.unpack("<II", fh.read(8))
        shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
        (n_meta,) = struct.unpack("<I", fh.read(4))
        meta = {}
        for _ in range(n_meta):
            (n,) = struct.unpack("<I", fh.read(4))
            name = fh.read(n).decode()
            (meta[name],) = struct.unpack("<d", fh.read(8))
        dtype = "<c16" if kind == _COMPLEX else "<f8"
        arr = np.frombuffer(fh.read(), dtype=dtype).reshape(shape).copy()
    return (arr, meta) if with_meta else arr


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def append_csv(path, header, rows):
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(header)
        w.writerows(rows)


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_pgm16(path, image: np.ndarray, vmax: float | None = None):
    """Binary 16-bit PGM (P5, big-endian samples), linearly scaled to 0..65535."""
    img = np.asarray(image, dtype=float)
    top = float(img.max()) if vmax is None else float(vmax)
    scaled = np.zeros(img.shape) if top <= 0 else np.clip(img / top, 0, 1) * 65535
    data = np.rint(scaled).astype(">u2")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(data.tobytes())


def read_pgm16(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(h, w).astype(np.uint16)
