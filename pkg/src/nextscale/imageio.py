"""Binary PGM/PPM image output and plain-text token grid dumps.

Pixels are written 8-bit: value = round(clamp(x, 0, 1) * 255). A
single-channel map becomes a P5 PGM, a three-channel map a P6 PPM, both
with the header "P5\\n<width> <height>\\n255\\n" followed by raw bytes in
row-major order (RGB interleaved for PPM).
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import ConfigurationError
from .pyramid import TokenPyramid


def to_bytes_u8(image: torch.Tensor | np.ndarray) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8)


def write_image(path: str, image: torch.Tensor | np.ndarray) -> None:
    """Write [H, W], [H, W, 1] or [H, W, 3] pixels as PGM/PPM."""
    arr = to_bytes_u8(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 2:
        magic, body = b"P5", arr
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic, body = b"P6", arr
    else:
        raise ConfigurationError(f"cannot write image with shape {arr.shape}")
    h, w = arr.shape[0], arr.shape[1]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n" + f"{w} {h}\n255\n".encode("ascii"))
        fh.write(body.tobytes(order="C"))


def write_token_grids(path: str, tokens: TokenPyramid) -> None:
    """Dump every scale's token grid as aligned integers, one block per
    scale, so a generation can be inspected or diffed as text."""
    lines = []
    width = len(str(max(1, tokens.vocab - 1)))
    for i, grid in enumerate(tokens.grids, start=1):
        g = grid.detach().cpu().numpy()
        if g.ndim != 2:
            raise ConfigurationError("token grid dumps are per item; pass a single pyramid")
        lines.append(f"scale {i} ({g.shape[0]}x{g.shape[1]})")
        for row in g:
            lines.append(" ".join(f"{v:>{width}d}" for v in row))
        lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
