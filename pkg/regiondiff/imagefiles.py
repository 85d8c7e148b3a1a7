"""Reading and writing images, label maps and montages as PNG files.

Copyright © 2018 regiondiff contributors

This file is part of regiondiff.

regiondiff is free software: you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation, either version 3 of the License, or
(at your option) any later version.

regiondiff is distributed in the hope that it will be useful,
but WITHOUT ANY WARRANTY; without even the implied warranty of
MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
GNU General Public License for more details.

You should have received a copy of the GNU General Public License
along with regiondiff.  If not, see <http://www.gnu.org/licenses/>.
"""
import os
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from regiondiff.utils import atomic_write
from regiondiff.exceptions import DataError, ShapeError

# One color per region index. Label maps with more regions than this wrap.
MASK_PALETTE = (
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25),
    (0, 130, 200), (245, 130, 48), (145, 30, 180), (70, 240, 240),
    (240, 50, 230), (210, 245, 60), (250, 190, 212), (0, 128, 128),
    (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0))

MONTAGE_PADDING = 2


def to_pixels(images: torch.Tensor) -> np.ndarray:
    """Convert images in [-1, 1] shaped (N, C, H, W) to 8-bit (N, H, W, C)."""
    images = images.detach().cpu().to(torch.float64).clamp(-1, 1)
    pixels = torch.round((images + 1) * 127.5).to(torch.uint8)
    return pixels.permute(0, 2, 3, 1).numpy()


def from_pixels(pixels: np.ndarray) -> torch.Tensor:
    """Convert 8-bit images shaped (N, H, W, C) to [-1, 1] (N, C, H, W)."""
    images = torch.from_numpy(np.ascontiguousarray(pixels)).to(torch.float32)
    return (images / 127.5 - 1).permute(0, 3, 1, 2).contiguous()


def label_colors(labels: np.ndarray) -> np.ndarray:
    """Color a label map with the mask palette."""
    palette = np.array(MASK_PALETTE, dtype=np.uint8)
    return palette[labels.astype(np.int64) % len(palette)]


def _save(image: Image.Image, path: str) -> None:
    with atomic_write(path) as file:
        image.save(file, format="PNG")


def write_image_png(path: str, pixels: np.ndarray) -> None:
    """Write an 8-bit (H, W, C) image."""
    if pixels.shape[-1] == 1:
        image = Image.fromarray(pixels[..., 0], mode="L")
    else:
        image = Image.fromarray(pixels, mode="RGB")
    _save(image, path)


def write_label_png(path: str, labels: np.ndarray) -> None:
    """Write a label map as an indexed PNG with the mask palette."""
    if labels.max(initial=0) > 255:
        raise ShapeError("label maps are limited to 256 regions")
    image = Image.fromarray(labels.astype(np.uint8), mode="P")
    image.putpalette([
        value for color in MASK_PALETTE for value in color])
    _save(image, path)


def write_soft_mask_pngs(path_prefix: str, soft: np.ndarray) -> None:
    """Write one grayscale PNG per channel of a (K, H, W) soft mask."""
    for k, channel in enumerate(soft):
        pixels = np.round(np.clip(channel, 0, 1) * 255).astype(np.uint8)
        _save(Image.fromarray(pixels, mode="L"),
              "{0}_k{1}.png".format(path_prefix, k))


def open_png(path: str) -> Image.Image:
    """Open and fully decode an image file.

    Raises:
        DataError: The file is unreadable, truncated or not an 8-bit image.
    """
    try:
        image = Image.open(path)
        image.load()
    except (OSError, SyntaxError, ValueError,
            Image.DecompressionBombError) as e:
        raise DataError("could not decode '{0}': {1}".format(path, e))
    if image.mode not in ("RGB", "RGBA", "L", "LA", "P"):
        raise DataError("'{0}' is not an 8-bit image (mode {1})".format(
            path, image.mode))
    return image


def read_image_png(path: str) -> np.ndarray:
    """Read an image as 8-bit RGB (H, W, 3)."""
    return np.asarray(open_png(path).convert("RGB"))


def read_label_png(path: str) -> np.ndarray:
    """Read an indexed or grayscale label map as (H, W) uint8."""
    image = open_png(path)
    if image.mode not in ("P", "L"):
        raise DataError("'{}' is not an indexed label map".format(path))
    return np.asarray(image).astype(np.uint8)


def montage(tiles: Sequence[np.ndarray], columns: int) -> np.ndarray:
    """Arrange equally sized (H, W, C) tiles into a padded grid.

    Args:
        tiles: The tiles, filled in row by row.
        columns: The maximum number of tiles per row.
    """
    if not tiles:
        raise ShapeError("a montage needs at least one tile")
    height, width, channels = tiles[0].shape
    columns = max(1, min(columns, len(tiles)))
    rows = -(-len(tiles) // columns)
    pad = MONTAGE_PADDING
    grid = np.full(
        (pad + rows * (height + pad), pad + columns * (width + pad),
         channels), 255, dtype=np.uint8)
    for index, tile in enumerate(tiles):
        if tile.shape != (height, width, channels):
            raise ShapeError(
                "montage tile shape mismatch: expected {0}, got {1}".format(
                    (height, width, channels), tile.shape))
        row, column = divmod(index, columns)
        top = pad + row * (height + pad)
        left = pad + column * (width + pad)
        grid[top:top + height, left:left + width] = tile
    return grid


def write_montage(path: str, pixels: np.ndarray, labels=None,
                  columns=8) -> None:
    """Write a montage of images, each followed by its colored label map.

    Args:
        path: The path of the PNG file.
        pixels: 8-bit images shaped (N, H, W, 3).
        labels: Label maps shaped (N, H, W), if any.
        columns: The number of image columns.
    """
    tiles = []
    for index, image in enumerate(pixels):
        tiles.append(image)
        if labels is not None:
            tiles.append(label_colors(labels[index]))
    if labels is not None:
        columns *= 2
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    write_image_png(path, montage(tiles, columns))
