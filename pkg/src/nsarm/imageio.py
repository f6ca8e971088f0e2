"""PPM (P6, 8-bit) reading and writing; PNG through Pillow when installed."""
from __future__ import annotations

import io
import re
from pathlib import Path

import numpy as np
import torch

from .checkpoint import atomic_write

_HEADER = re.compile(rb"P6\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s")


def to_uint8(image: torch.Tensor) -> np.ndarray:
    a = image.detach().cpu().numpy().astype(np.float64)
    return np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(image: torch.Tensor) -> bytes:
    """``(H, W, 3)`` float image in [0, 1] -> binary PPM bytes."""
    if image.dim() != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3), got {tuple(image.shape)}")
    h, w = image.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + to_uint8(image).tobytes()


def decode_ppm(data: bytes) -> torch.Tensor:
    m = _HEADER.match(data)
    if not m:
        raise ValueError("not a binary PPM (P6) image")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"only 8-bit PPM is supported (maxval {maxval})")
    body = data[m.end() : m.end() + w * h * 3]
    if len(body) != w * h * 3:
        raise ValueError("truncated PPM payload")
    a = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return torch.from_numpy(a.astype(np.float32) / 255.0)


def read_image(path) -> torch.Tensor:
    path = Path(path)
    data = path.read_bytes()
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError:
            raise RuntimeError("reading PNG needs Pillow (install the png extra)") from None
        a = np.asarray(Image.open(io.BytesIO(data)).convert("RGB"), dtype=np.float32) / 255.0
        return torch.from_numpy(a)
    return decode_ppm(data)


def write_image(path, image: torch.Tensor) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError:
            raise RuntimeError("writing PNG needs Pillow (install the png extra)") from None
        buf = io.BytesIO()
        Image.fromarray(to_uint8(image)).save(buf, format="PNG")
        atomic_write(path, buf.getvalue())
    else:
        atomic_write(path, encode_ppm(image))
