"""Image payloads, content hashing and the content-addressed blob directory.

Images are plain numpy arrays shaped ``(H, W)`` or ``(H, W, C)``. Identity is the
SHA-256 of dtype, shape and raw bytes, so equal pixels always share one blob.
"""

from __future__ import annotations

import base64
import hashlib
import io
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image


def as_image(data) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(data))
    if arr.ndim not in (2, 3) or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"not an image array: shape {arr.shape}")
    return arr


def image_hash(image: np.ndarray) -> str:
    arr = np.ascontiguousarray(image)
    h = hashlib.sha256()
    h.update(f"{arr.dtype.str}|{','.join(map(str, arr.shape))}|".encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def load_image_file(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def decode_image_bytes(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"))


def encode_png(image: np.ndarray) -> bytes:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(arr, 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def encode_png_base64(image: np.ndarray) -> str:
    return base64.b64encode(encode_png(image)).decode("ascii")


class BlobStore:
    """Directory of ``<sha256>.npy`` files. Writes are atomic and idempotent."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def path(self, digest: str) -> Path:
        return self.root / f"{digest}.npy"

    def has(self, digest: str) -> bool:
        return self.path(digest).exists()

    def put(self, image: np.ndarray) -> str:
        digest = image_hash(image)
        target = self.path(digest)
        if target.exists():
            return digest
        self.root.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                np.save(fh, np.ascontiguousarray(image), allow_pickle=False)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return digest

    def get(self, digest: str) -> np.ndarray:
        try:
            return np.load(self.path(digest), allow_pickle=False)
        except FileNotFoundError:
            raise KeyError(f"blob {digest} not found in {self.root}") from None
