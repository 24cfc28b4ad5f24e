"""Image and landmark files."""
from __future__ import annotations

import json
import os

import numpy as np


def to_bytes(image) -> np.ndarray:
    """Quantize [0, 1] floats to 8 bits with ``floor(c * 255 + 0.5)``."""
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(image * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path: str | os.PathLike, image) -> None:
    """Binary PPM (P6, maxval 255)."""
    data = to_bytes(image)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise ValueError(f"{path}: only P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def write_landmarks(path: str | os.PathLike, landmarks) -> None:
    """JSON array of ``[x, y]`` pairs; missing points (NaN) become ``null``."""
    rows = []
    for x, y in np.asarray(landmarks, dtype=np.float64).reshape(-1, 2):
        rows.append(None if not (np.isfinite(x) and np.isfinite(y)) else [float(x), float(y)])
    with open(path, "w") as f:
        json.dump(rows, f)
        f.write("\n")


def read_landmarks(path: str | os.PathLike) -> np.ndarray:
    with open(path) as f:
        rows = json.load(f)
    if not isinstance(rows, list):
        raise ValueError(f"{path}: expected a JSON array")
    out = np.full((len(rows), 2), np.nan)
    for i, r in enumerate(rows):
        if r is None:
            continue
        if len(r) != 2:
            raise ValueError(f"{path}: landmark {i} is not an [x, y] pair")
        out[i] = r
    return out
