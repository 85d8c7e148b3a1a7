"""Procedurally generated scenes with exact region labels, and datasets on disk.

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
import glob
import math
import colorsys
import hashlib
import logging
import dataclasses
from typing import Dict, Optional, Tuple

import numpy as np
import torch
from PIL import Image, ImageDraw

from regiondiff.containerbase import JSONFile
from regiondiff.imagefiles import (
    from_pixels, open_png, read_image_png, read_label_png, write_image_png,
    write_label_png)
from regiondiff.exceptions import ConfigError, DataError, RangeError

logger = logging.getLogger(__name__)

REGION_MODELS = ("fg_bg", "two_shapes")
SHAPES = ("ellipse", "rectangle", "blob")

DATASET_FORMAT = "regiondiff-dataset"
DATASET_VERSION = 1
MANIFEST_NAME = "manifest"
IMAGE_NAME = "{:05d}.png"

BLOB_VERTICES = 9


@dataclasses.dataclass(frozen=True)
class SceneSpec:
    """The distribution of generated scenes.

    In "fg_bg" mode a scene is a body shape with a differently colored part
    attached to its boundary, over a textured background. In "two_shapes"
    mode it is two independent shapes over the background. Both modes label
    every pixel with one of three regions: 0 background, 1 and 2 the shapes.

    Attributes:
        resolution: The side length of the images in pixels.
        num_images: The number of images to generate.
        region_model: "fg_bg" or "two_shapes".
        shapes: The shapes to draw the regions from.
        size_range: The range of the area of the main shape, as a fraction of
            the image area.
        part_scale: The range of the size of the attached part relative to
            the body.
        texture_amplitude: The amplitude of the background value noise.
        texture_cells: The number of value noise cells along each side.
        seed: The seed for the per-image random streams.
    """
    resolution: int = 32
    num_images: int = 4000
    region_model: str = "fg_bg"
    shapes: Tuple[str, ...] = SHAPES
    size_range: Tuple[float, float] = (0.12, 0.35)
    part_scale: Tuple[float, float] = (0.3, 0.55)
    texture_amplitude: float = 0.35
    texture_cells: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "size_range", tuple(self.size_range))
        object.__setattr__(self, "part_scale", tuple(self.part_scale))
        self.validate()

    @property
    def num_regions(self) -> int:
        """The number of region labels every scene uses."""
        return 3

    def validate(self) -> None:
        """Check for degenerate values.

        Raises:
            ConfigError: A value is out of range.
        """
        if self.resolution < 4:
            raise ConfigError(
                "model.resolution: must be at least 4 for generated scenes",
                field="model.resolution")
        if self.num_images < 0:
            raise ConfigError(
                "data.num_images: must not be negative",
                field="data.num_images")
        if self.region_model not in REGION_MODELS:
            raise ConfigError(
                "data.region_model: must be one of {}".format(
                    ", ".join(REGION_MODELS)),
                field="data.region_model")
        if not self.shapes or not set(self.shapes) <= set(SHAPES):
            raise ConfigError(
                "data.shapes: must be a nonempty subset of {}".format(
                    ", ".join(SHAPES)),
                field="data.shapes")
        low, high = self.size_range
        if not 0 < low <= high < 1:
            raise ConfigError(
                "data.size_range: must satisfy 0 < low <= high < 1",
                field="data.size_range")
        low, high = self.part_scale
        if not 0 < low <= high <= 1:
            raise ConfigError(
                "data.part_scale: must satisfy 0 < low <= high <= 1",
                field="data.part_scale")
        if self.texture_amplitude < 0:
            raise ConfigError(
                "data.texture_amplitude: must not be negative",
                field="data.texture_amplitude")
        if self.texture_cells < 1:
            raise ConfigError(
                "data.texture_cells: must be at least 1",
                field="data.texture_cells")

    def to_dict(self) -> Dict:
        vals = dataclasses.asdict(self)
        for key in ("shapes", "size_range", "part_scale"):
            vals[key] = list(vals[key])
        return vals

    @classmethod
    def from_dict(cls, vals: Dict) -> "SceneSpec":
        return cls(**vals)


@dataclasses.dataclass
class Dataset:
    """A set of 8-bit images with optional region label maps.

    Attributes:
        pixels: The images shaped (N, H, W, C) as uint8.
        masks: The label maps shaped (N, H, W) as uint8, or None.
        manifest: A description of where the dataset came from, with the
            image count and checksum.
    """
    pixels: np.ndarray
    masks: Optional[np.ndarray]
    manifest: Dict

    def __post_init__(self) -> None:
        if self.masks is not None and len(self.masks) != len(self.pixels):
            raise DataError(
                "dataset has {0} images but {1} label maps".format(
                    len(self.pixels), len(self.masks)))

    def __len__(self) -> int:
        return len(self.pixels)

    @property
    def resolution(self) -> int:
        return self.pixels.shape[1]

    @property
    def num_classes(self) -> Optional[int]:
        """The number of region labels, or None without label maps.

        Generated scenes count every region the generator draws, even if a
        label happens not to occur in this subset.
        """
        if self.masks is None:
            return None
        observed = 1 + int(self.masks.max(initial=0))
        scene = self.manifest.get("scene")
        if scene is None:
            return observed
        return max(observed, SceneSpec.from_dict(scene).num_regions)

    def images(self) -> torch.Tensor:
        """Get the images in [-1, 1] shaped (N, C, H, W)."""
        return from_pixels(self.pixels)

    def labels(self) -> Optional[torch.Tensor]:
        """Get the label maps as a long tensor shaped (N, H, W)."""
        if self.masks is None:
            return None
        return torch.from_numpy(self.masks.astype(np.int64))

    def subset(self, start: int, stop: int) -> "Dataset":
        pixels = self.pixels[start:stop]
        masks = None if self.masks is None else self.masks[start:stop]
        manifest = dict(self.manifest)
        manifest.update({
            "count": len(pixels),
            "checksum": dataset_checksum(pixels, masks),
            "range": [start, start + len(pixels)]})
        return Dataset(pixels, masks, manifest)


def dataset_checksum(pixels: np.ndarray,
                     masks: Optional[np.ndarray]) -> str:
    """Get the SHA-256 of the pixel data and label maps."""
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())
    if masks is not None:
        digest.update(np.ascontiguousarray(masks, dtype=np.uint8).tobytes())
    return digest.hexdigest()


def _make_manifest(pixels: np.ndarray, masks: Optional[np.ndarray],
                   source: str, scene: Optional[SceneSpec]) -> Dict:
    return {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "source": source,
        "count": len(pixels),
        "resolution": int(pixels.shape[1]),
        "channels": int(pixels.shape[3]),
        "has_masks": masks is not None,
        "checksum": dataset_checksum(pixels, masks),
        "scene": None if scene is None else scene.to_dict()}


def _value_noise(rng: np.random.Generator, resolution: int,
                 cells: int) -> np.ndarray:
    """Bilinearly interpolated random values on a coarse grid, in [-1, 1]."""
    grid = rng.uniform(-1, 1, (cells + 1, cells + 1)).astype(np.float32)
    noise = Image.fromarray(grid, mode="F").resize(
        (resolution, resolution), Image.BILINEAR)
    return np.asarray(noise, dtype=np.float64)


def _region_colors(rng: np.random.Generator) -> np.ndarray:
    """Three colors with hues a third of the color wheel apart."""
    hue = rng.uniform(0, 1)
    order = rng.permutation(3)
    colors = []
    for index in order:
        saturation = rng.uniform(0.45, 0.9)
        value = rng.uniform(0.35, 0.95)
        colors.append(colorsys.hsv_to_rgb(
            (hue + index / 3) % 1, saturation, value))
    return np.array(colors) * 2 - 1


def _shape_box(rng: np.random.Generator, resolution: int, area: float,
               center=None) -> Tuple[float, float, float, float]:
    """Pick a bounding box with the given area in pixels."""
    aspect = math.exp(rng.uniform(math.log(0.6), math.log(1.6)))
    width = min(math.sqrt(area * aspect), resolution - 1)
    height = min(area / width, resolution - 1)
    if center is None:
        cx = rng.uniform(width / 2, resolution - width / 2)
        cy = rng.uniform(height / 2, resolution - height / 2)
    else:
        cx, cy = center
    return cx - width / 2, cy - height / 2, cx + width / 2, cy + height / 2


def _draw_shape(draw: ImageDraw.ImageDraw, rng: np.random.Generator,
                shape: str, box: Tuple[float, float, float, float],
                label: int) -> None:
    if shape == "ellipse":
        draw.ellipse(box, fill=label)
    elif shape == "rectangle":
        draw.rectangle(box, fill=label)
    else:
        x0, y0, x1, y1 = box
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        offset = rng.uniform(0, 2 * math.pi)
        points = []
        for i in range(BLOB_VERTICES):
            angle = offset + 2 * math.pi * i / BLOB_VERTICES
            radius = rng.uniform(0.7, 1.0)
            points.append((
                cx + radius * (x1 - x0) / 2 * math.cos(angle),
                cy + radius * (y1 - y0) / 2 * math.sin(angle)))
        draw.polygon(points, fill=label)


def _scene_labels(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Rasterize the regions of one scene into a label map."""
    size = spec.resolution
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    image_area = size * size

    body_area = rng.uniform(*spec.size_range) * image_area
    body_shape = spec.shapes[rng.integers(len(spec.shapes))]
    body_box = _shape_box(rng, size, body_area)
    _draw_shape(draw, rng, body_shape, body_box, 1)

    part_shape = spec.shapes[rng.integers(len(spec.shapes))]
    if spec.region_model == "fg_bg":
        # The part is centered on the body's outline so that it's attached.
        part_area = body_area * rng.uniform(*spec.part_scale) ** 2
        x0, y0, x1, y1 = body_box
        angle = rng.uniform(0, 2 * math.pi)
        center = (
            (x0 + x1) / 2 + (x1 - x0) / 2 * math.cos(angle),
            (y0 + y1) / 2 + (y1 - y0) / 2 * math.sin(angle))
        part_box = _shape_box(rng, size, part_area, center=center)
    else:
        part_area = rng.uniform(*spec.size_range) * image_area
        part_box = _shape_box(rng, size, part_area)
    _draw_shape(draw, rng, part_shape, part_box, 2)

    return np.asarray(canvas, dtype=np.uint8)


def generate_scene(spec: SceneSpec,
                   index: int) -> Tuple[np.ndarray, np.ndarray]:
    """Generate one image and its label map.

    The image depends only on the seed of the scene description and the index.

    Returns:
        The 8-bit (H, W, 3) image and the (H, W) label map.
    """
    rng = np.random.default_rng([spec.seed, index])
    labels = _scene_labels(spec, rng)
    colors = _region_colors(rng)

    texture = _value_noise(rng, spec.resolution, spec.texture_cells)
    detail = _value_noise(rng, spec.resolution, spec.texture_cells * 2)
    amplitude = np.where(
        labels == 0, spec.texture_amplitude, spec.texture_amplitude / 4)
    shading = (texture * 0.7 + detail * 0.3) * amplitude
    image = colors[labels] + shading[..., np.newaxis]

    pixels = np.round((np.clip(image, -1, 1) + 1) * 127.5).astype(np.uint8)
    return pixels, labels


def generate_dataset(spec: SceneSpec) -> Dataset:
    """Generate a dataset of scenes with exact label maps.

    Raises:
        ConfigError: The spec is degenerate.
    """
    spec.validate()
    size = spec.resolution
    pixels = np.zeros((spec.num_images, size, size, 3), dtype=np.uint8)
    masks = np.zeros((spec.num_images, size, size), dtype=np.uint8)
    for index in range(spec.num_images):
        pixels[index], masks[index] = generate_scene(spec, index)
    return Dataset(
        pixels, masks, _make_manifest(pixels, masks, "synthetic", spec))


def split(dataset: Dataset, heldout: int) -> Tuple[Dataset, Dataset]:
    """Split off the last images as a held-out set.

    Raises:
        RangeError: There are fewer images than requested.
    """
    if not 0 <= heldout <= len(dataset):
        raise RangeError(
            "cannot hold out {0} of {1} images".format(heldout, len(dataset)))
    boundary = len(dataset) - heldout
    return (dataset.subset(0, boundary),
            dataset.subset(boundary, len(dataset)))


def count_classes(*datasets: Dataset) -> int:
    """Get the number of region labels across the labeled datasets.

    Raises:
        DataError: None of the datasets has label maps.
    """
    counts = [
        dataset.num_classes for dataset in datasets
        if dataset.num_classes is not None]
    if not counts:
        raise DataError("no label maps to count region labels in")
    return max(counts)


def save_dataset(dataset: Dataset, path: str) -> None:
    """Write a dataset as a directory of PNG files with a manifest."""
    write_label = dataset.masks is not None
    for index in range(len(dataset)):
        name = IMAGE_NAME.format(index)
        write_image_png(
            os.path.join(path, "images", name), dataset.pixels[index])
        if write_label:
            write_label_png(
                os.path.join(path, "masks", name), dataset.masks[index])

    manifest_file = JSONFile(os.path.join(path, MANIFEST_NAME))
    manifest_file.vals = dataset.manifest
    manifest_file.write()


def load_dataset(path: str) -> Dataset:
    """Read a dataset written by save_dataset().

    Raises:
        DataError: The manifest is missing or malformed, a file is missing or
            unreadable, or the contents don't match the checksum.
    """
    manifest_file = JSONFile(os.path.join(path, MANIFEST_NAME))
    manifest_file.read()
    manifest = manifest_file.vals
    if (not isinstance(manifest, dict)
            or manifest.get("format") != DATASET_FORMAT):
        raise DataError("'{}' is not a dataset directory".format(path))
    if manifest.get("version") != DATASET_VERSION:
        raise DataError(
            "unsupported dataset version {0} in '{1}'".format(
                manifest.get("version"), path))

    count = manifest["count"]
    size = manifest["resolution"]
    pixels = np.zeros((count, size, size, 3), dtype=np.uint8)
    masks = np.zeros((count, size, size), dtype=np.uint8) \
        if manifest.get("has_masks") else None
    for index in range(count):
        name = IMAGE_NAME.format(index)
        image_path = os.path.join(path, "images", name)
        if not os.path.isfile(image_path):
            raise DataError("missing image '{}'".format(image_path))
        image = read_image_png(image_path)
        if image.shape != pixels.shape[1:]:
            raise DataError(
                "'{0}' has shape {1}, expected {2}".format(
                    image_path, image.shape, pixels.shape[1:]))
        pixels[index] = image
        if masks is not None:
            mask_path = os.path.join(path, "masks", name)
            if not os.path.isfile(mask_path):
                raise DataError("missing label map '{}'".format(mask_path))
            masks[index] = read_label_png(mask_path)

    if dataset_checksum(pixels, masks) != manifest["checksum"]:
        raise DataError(
            "the contents of '{}' don't match its checksum".format(path))
    return Dataset(pixels, masks, manifest)


def _center_square(image: Image.Image) -> Image.Image:
    width, height = image.size
    side = min(width, height)
    left = (width - side) // 2
    top = (height - side) // 2
    return image.crop((left, top, left + side, top + side))


def load_png_dir(path: str, resolution: int) -> Dataset:
    """Read every PNG file in a directory as an unlabeled dataset.

    Images are cropped to a centered square, resized to the resolution and
    converted to RGB. Files are read in sorted order.

    A directory written by save_dataset() is read with its label maps
    instead, and must already have the resolution.

    Raises:
        DataError: The directory doesn't exist, a file can't be decoded or a
            saved dataset has another resolution.
    """
    if not os.path.isdir(path):
        raise DataError("'{}' is not a directory".format(path))
    if os.path.isfile(os.path.join(path, MANIFEST_NAME)):
        dataset = load_dataset(path)
        if dataset.resolution != resolution:
            raise DataError(
                "'{0}' has {1}x{1} images, expected {2}x{2}".format(
                    path, dataset.resolution, resolution))
        return dataset

    files = sorted(glob.glob(os.path.join(path, "*.png")))
    if not files:
        logger.warning("no PNG files found in '%s'", path)
    pixels = np.zeros((len(files), resolution, resolution, 3), dtype=np.uint8)
    for index, file_path in enumerate(files):
        image = _center_square(open_png(file_path).convert("RGB"))
        if image.size != (resolution, resolution):
            image = image.resize((resolution, resolution), Image.BICUBIC)
        pixels[index] = np.asarray(image)

    manifest = _make_manifest(pixels, None, os.path.abspath(path), None)
    return Dataset(pixels, None, manifest)
