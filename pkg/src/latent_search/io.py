"""Atomic file output and PGM image I/O."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import cv2
import numpy as np


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def read_pgm(path: Path) -> np.ndarray:
    """8-bit grayscale image (PGM or anything else OpenCV decodes)."""
    data = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    img = cv2.imdecode(data, cv2.IMREAD_UNCHANGED) if data.size else None
    if img is None or img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"{path}: not an 8-bit grayscale image")
    return img


def write_pgm(path: Path, img: np.ndarray) -> None:
    ok, buf = cv2.imencode(".pgm", np.ascontiguousarray(img, dtype=np.uint8))
    if not ok:
        raise ValueError("image could not be encoded as PGM")
    atomic_write_bytes(Path(path), buf.tobytes())
