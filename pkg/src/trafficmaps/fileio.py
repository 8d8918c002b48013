"""File formats: lossless matrix CSV, 0/1 masks, key=value manifests, binary PGM.

The matrix dialect is header-less comma-separated rows with 17-significant-
digit formatting, so write/read round-trips are exact for float64.
"""

from __future__ import annotations

import os

import numpy as np


class ParseError(ValueError):
    """A data file is missing or malformed; message names file and line."""


class ConfigError(ValueError):
    """A configuration file or value is invalid."""


def write_matrix(path, M: np.ndarray):
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    with open(path, "w") as fh:
        for row in M:
            fh.write(",".join(f"{v:.17g}" for v in row))
            fh.write("\n")


def read_matrix(path) -> np.ndarray:
    if not os.path.exists(path):
        raise ParseError(f"{path}: file not found")
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise ParseError(f"{path}:{lineno}: expected {width} columns, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64)


def write_mask(path, mask: np.ndarray):
    mask = np.asarray(mask)
    with open(path, "w") as fh:
        for row in mask.astype(int):
            fh.write(",".join(str(int(v)) for v in row))
            fh.write("\n")


def read_mask(path) -> np.ndarray:
    M = read_matrix(path)
    if not np.isin(M, (0.0, 1.0)).all():
        raise ParseError(f"{path}: mask entries must be 0 or 1")
    return M.astype(bool)


def write_manifest(path, entries: dict):
    with open(path, "w") as fh:
        for key in sorted(entries):
            fh.write(f"{key}={entries[key]}\n")


def read_manifest(path) -> dict:
    if not os.path.exists(path):
        raise ParseError(f"{path}: file not found")
    out: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_pgm(path, gray: np.ndarray):
    """Binary (P5) 8-bit grayscale image; `gray` is a 2-d uint8-compatible array."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError("PGM data must be 2-d")
    gray = np.clip(np.round(gray), 0, 255).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ParseError(f"{path}: not a binary PGM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ParseError(f"{path}: expected 8-bit PGM")
    pixels = np.frombuffer(data[pos : pos + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise ParseError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w)


def parse_config(path) -> dict:
    """Flat `section.key=value` lines; '#' starts a comment."""
    if not os.path.exists(path):
        raise ConfigError(f"{path}: config file not found")
    out: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            if key in out:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value.strip()
    return out
