"""Frame, field and table I/O.

Frames are grayscale PNG (8 or 16 bit) or binary PGM (P5). Sequences are
directories of numbered frames such as ``frame_0001.png``. Displacement
fields use a small "FLO1" dump: the magic bytes, little-endian uint32 width
and height, then interleaved (dx, dy) float32 values in row-major order.
"""

import csv
import os
import re
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .imagecore import to_gray

FLO_MAGIC = b"FLO1"
FRAME_PATTERN = re.compile(r"(\d+)\.(png|pgm)$", re.IGNORECASE)


def _read_pgm(path):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    # header: magic, width, height, maxval separated by whitespace / comments
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: only binary P5 PGM is supported")
    width, height, maxval = (int(t) for t in tokens[1:])
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    raw = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    return raw.reshape(height, width).astype(np.float64) / maxval


def _write_pgm(path, image, bits):
    maxval = 255 if bits == 8 else 65535
    q = np.round(np.clip(image, 0.0, 1.0) * maxval)
    arr = q.astype(np.uint8) if bits == 8 else q.astype(">u2")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_image(path):
    """Read a grayscale image as float64 in [0, 1]; color is converted to luma."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return _read_pgm(path)
    with Image.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(img, dtype=np.float64)
            return arr / (65535.0 if arr.max(initial=0) > 255 or img.mode.startswith("I;16") else 255.0)
        if img.mode not in ("L", "RGB", "RGBA"):
            img = img.convert("RGB")
        arr = np.asarray(img, dtype=np.float64) / 255.0
    return np.clip(to_gray(arr), 0.0, 1.0)


def write_image(path, image, bits=8):
    """Write `image` (clamped to [0, 1]) as 8- or 16-bit PNG or PGM."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image = np.asarray(image, dtype=np.float64)
    if path.suffix.lower() == ".pgm":
        _write_pgm(path, image, bits)
        return path
    if bits == 8:
        arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(path)
    else:
        arr = np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)
        Image.fromarray(arr).save(path)
    return path


def list_frames(directory):
    """Numbered frame files in `directory`, sorted by frame number."""
    directory = Path(directory)
    found = []
    for entry in directory.iterdir():
        m = FRAME_PATTERN.search(entry.name)
        if m and entry.is_file():
            found.append((int(m.group(1)), entry))
    found.sort()
    return [p for _, p in found]


def read_sequence(directory):
    paths = list_frames(directory)
    if not paths:
        raise FileNotFoundError(f"no numbered frames found in {directory}")
    frames = [read_image(p) for p in paths]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ValueError(f"frames in {directory} have differing shapes {sorted(shapes)}")
    return np.stack(frames)


def write_sequence(directory, frames, bits=8, prefix="frame_", ext=".png"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames, start=1):
        paths.append(write_image(directory / f"{prefix}{i:04d}{ext}", frame, bits=bits))
    return paths


def write_flo(path, field):
    field = np.asarray(field)
    h, w = field.shape
    inter = np.empty((h, w, 2), dtype="<f4")
    inter[..., 0] = field.real
    inter[..., 1] = field.imag
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(inter.tobytes())
    return path


def read_flo(path):
    data = Path(path).read_bytes()
    if data[:4] != FLO_MAGIC:
        raise ValueError(f"{path}: not a FLO1 file")
    w, h = struct.unpack("<II", data[4:12])
    inter = np.frombuffer(data, dtype="<f4", count=w * h * 2, offset=12).reshape(h, w, 2)
    return inter[..., 0].astype(np.float64) + 1j * inter[..., 1].astype(np.float64)


def write_csv(path, header, rows):
    """Write rows atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, path)
    return path


def append_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(header)
        writer.writerows(rows)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
