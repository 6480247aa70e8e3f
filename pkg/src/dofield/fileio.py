"""Small text and image formats shared by several modules.

The key-value text format is one ``key = value`` pair per line. Values
are whitespace separated tokens; ``;`` separates rows of a matrix.
Repeated keys are allowed and preserved in order. Lines starting with
``#`` are comments.
"""

import os

import numpy as np


class FormatError(ValueError):
    """A file does not follow the expected layout."""


def fmt_float(x):
    return format(float(x), ".17g")


def fmt_vector(values):
    return " ".join(fmt_float(v) for v in np.ravel(values))


def fmt_matrix(rows):
    return " ; ".join(fmt_vector(r) for r in rows)


def parse_vector(text):
    return np.array([float(t) for t in text.split()], dtype=np.float64)


def parse_matrix(text):
    return np.array([[float(t) for t in row.split()] for row in text.split(";")], dtype=np.float64)


def parse_ints(text):
    return [int(t) for t in text.split()]


def write_kv(path, pairs):
    """Write ``(key, value)`` pairs; values must already be strings."""
    lines = []
    for key, value in pairs:
        if "\n" in value or "=" in key:
            raise FormatError(f"cannot serialize key {key!r}")
        lines.append(f"{key} = {value}")
    data = "\n".join(lines) + "\n"
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc


def read_kv(path):
    """Read a key-value file into a list of ``(key, value)`` pairs."""
    try:
        with open(path, encoding="ascii") as fh:
            text = fh.read()
    except OSError as exc:
        raise OSError(f"failed to read {path}: {exc}") from exc
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def kv_dict(pairs, required=(), fmt=None, path="<kv>"):
    """Collapse pairs to a dict (last wins) and check required keys / format tag."""
    out = {}
    for k, v in pairs:
        out[k] = v
    if fmt is not None and out.get("format") != fmt:
        raise FormatError(f"{path}: expected format {fmt!r}, got {out.get('format')!r}")
    missing = [k for k in required if k not in out]
    if missing:
        raise FormatError(f"{path}: missing keys {missing}")
    return out


def write_pgm(path, image):
    """Write a {0,1} or uint8 image as binary PGM (P5, maxval 255, black=0)."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM image must be 2-D, got shape {img.shape}")
    if img.dtype == bool or img.max(initial=0) <= 1:
        data = (img.astype(np.uint8) * 255).astype(np.uint8)
    else:
        data = img.astype(np.uint8)
    h, w = data.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(data).tobytes())
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc


def read_pgm(path):
    """Read a P5 PGM written by :func:`write_pgm`; returns a {0,1} uint8 image."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise OSError(f"failed to read {path}: {exc}") from exc
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while raw[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise FormatError(f"{path}: truncated image data")
    return (data.reshape(h, w) > 127).astype(np.uint8)


def ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create directory {path}: {exc}") from exc
    return path
