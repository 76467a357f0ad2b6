"""PNG/PPM loading and saving for the harness and CLI."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np
import torch
from PIL import Image

SUPPORTED_SUFFIXES = (".png", ".ppm")


def load_image(path: Union[str, Path]) -> torch.Tensor:
    """Load an image as a [3,H,W] float tensor in [0,1].

    Grayscale images are replicated to three channels.
    """
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        arr = np.asarray(rgb, dtype=np.uint8)
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).float() / 255.0


def save_image(t: torch.Tensor, path: Union[str, Path]) -> None:
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise ValueError("save_image expects a single image")
        t = t[0]
    arr = (t.clamp(0, 1) * 255.0).round().byte().permute(1, 2, 0).numpy()
    Image.fromarray(arr).save(path)
