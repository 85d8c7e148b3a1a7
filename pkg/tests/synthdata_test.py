"""Test synthdata.py.

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
import json
import logging
import tempfile
import dataclasses

import numpy as np
import pytest
from PIL import Image

from regiondiff.synthdata import (
    MANIFEST_NAME, SceneSpec, count_classes, dataset_checksum,
    generate_dataset, generate_scene, load_dataset, load_png_dir,
    save_dataset, split)
from regiondiff.exceptions import ConfigError, DataError, RangeError

SMALL_SPEC = SceneSpec(resolution=16, num_images=6, seed=1)


@pytest.fixture
def tmp_dir():
    tmp_dir = tempfile.TemporaryDirectory(prefix="regiondiff-")

    # This function must yield instead of returning so that the temporary
    # directory object isn't cleaned up before the test.
    yield tmp_dir.name

    tmp_dir.cleanup()


def _write_rgb(path, pixels):
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), "RGB").save(path)


class TestSceneSpec:
    @pytest.mark.parametrize("changes,field", [
        ({"region_model": "three_shapes"}, "data.region_model"),
        ({"shapes": ("star",)}, "data.shapes"),
        ({"size_range": (0.5, 0.2)}, "data.size_range"),
        ({"num_images": -1}, "data.num_images"),
        ({"resolution": 2}, "model.resolution")])
    def test_invalid(self, changes, field):
        """Degenerate scene settings name the offending field."""
        with pytest.raises(ConfigError) as error:
            dataclasses.replace(SMALL_SPEC, **changes)
        assert error.value.field == field

    def test_from_dict(self):
        """The description stored in manifests rebuilds the same description."""
        vals = json.loads(json.dumps(SMALL_SPEC.to_dict()))
        assert SceneSpec.from_dict(vals) == SMALL_SPEC


class TestGenerateDataset:
    def test_deterministic(self):
        """The same seed gives the same checksum."""
        first = generate_dataset(SMALL_SPEC)
        second = generate_dataset(SMALL_SPEC)
        other = generate_dataset(dataclasses.replace(SMALL_SPEC, seed=2))

        assert first.manifest["checksum"] == second.manifest["checksum"]
        assert first.manifest["checksum"] != other.manifest["checksum"]

    def test_scene_independent_of_count(self):
        """Each scene depends only on the seed and its index."""
        dataset = generate_dataset(SMALL_SPEC)
        pixels, labels = generate_scene(SMALL_SPEC, 4)
        assert np.array_equal(dataset.pixels[4], pixels)
        assert np.array_equal(dataset.masks[4], labels)

    @pytest.mark.parametrize("region_model", ["fg_bg", "two_shapes"])
    def test_labels_partition(self, region_model):
        """Every pixel has exactly one of the three region labels."""
        spec = dataclasses.replace(SMALL_SPEC, region_model=region_model)
        dataset = generate_dataset(spec)

        assert dataset.pixels.shape == (6, 16, 16, 3)
        assert dataset.masks.shape == (6, 16, 16)
        for labels in dataset.masks:
            counts = np.bincount(labels.ravel(), minlength=3)
            assert len(counts) == 3
            assert counts.sum() == 16 * 16
            assert counts[0] > 0

    def test_empty(self):
        """Zero images give an empty dataset with a valid manifest."""
        dataset = generate_dataset(dataclasses.replace(
            SMALL_SPEC, num_images=0))
        assert len(dataset) == 0
        assert dataset.manifest["count"] == 0
        assert dataset.manifest["checksum"] == dataset_checksum(
            dataset.pixels, dataset.masks)

    def test_images_in_range(self):
        """Images convert to channels-first values in [-1, 1]."""
        images = generate_dataset(SMALL_SPEC).images()
        assert tuple(images.shape) == (6, 3, 16, 16)
        assert float(images.min()) >= -1
        assert float(images.max()) <= 1


class TestSplit:
    def test_held_out_last(self):
        """The last images are held out."""
        dataset = generate_dataset(SMALL_SPEC)
        train, heldout = split(dataset, 2)

        assert len(train) == 4 and len(heldout) == 2
        assert np.array_equal(heldout.pixels, dataset.pixels[4:])
        assert heldout.manifest["range"] == [4, 6]
        assert heldout.manifest["count"] == 2
        assert heldout.manifest["checksum"] == dataset_checksum(
            heldout.pixels, heldout.masks)

    def test_too_many(self):
        """More images than exist can't be held out."""
        with pytest.raises(RangeError):
            split(generate_dataset(SMALL_SPEC), 7)


class TestSaveLoad:
    def test_save_load(self, tmp_dir):
        """A saved dataset is read back with the same contents."""
        dataset = generate_dataset(SMALL_SPEC)
        save_dataset(dataset, tmp_dir)
        loaded = load_dataset(tmp_dir)

        assert np.array_equal(loaded.pixels, dataset.pixels)
        assert np.array_equal(loaded.masks, dataset.masks)
        assert loaded.manifest["scene"] == SMALL_SPEC.to_dict()
        assert os.path.isfile(os.path.join(tmp_dir, "masks", "00005.png"))

    def test_png_dir_reads_manifest(self, tmp_dir):
        """A directory with a manifest is read with its label maps."""
        save_dataset(generate_dataset(SMALL_SPEC), tmp_dir)
        loaded = load_png_dir(tmp_dir, 16)
        assert loaded.masks is not None
        assert len(loaded) == 6

    def test_saved_dataset_wrong_resolution(self, tmp_dir):
        """A saved dataset isn't silently resized."""
        save_dataset(generate_dataset(SMALL_SPEC), tmp_dir)
        with pytest.raises(DataError):
            load_png_dir(tmp_dir, 8)

    def test_checksum_mismatch(self, tmp_dir):
        """Modified contents don't match the checksum."""
        save_dataset(generate_dataset(SMALL_SPEC), tmp_dir)
        _write_rgb(
            os.path.join(tmp_dir, "images", "00002.png"),
            np.zeros((16, 16, 3)))
        with pytest.raises(DataError):
            load_dataset(tmp_dir)

    def test_missing_image(self, tmp_dir):
        """A missing file is a data error."""
        save_dataset(generate_dataset(SMALL_SPEC), tmp_dir)
        os.remove(os.path.join(tmp_dir, "images", "00003.png"))
        with pytest.raises(DataError):
            load_dataset(tmp_dir)

    def test_wrong_format(self, tmp_dir):
        """A manifest of another kind is rejected."""
        with open(os.path.join(tmp_dir, MANIFEST_NAME), "w") as file:
            json.dump({"format": "something-else"}, file)
        with pytest.raises(DataError):
            load_dataset(tmp_dir)


class TestClasses:
    def test_generated_regions(self):
        """Generated scenes have a label for every region the generator
        draws, even in a subset where one never occurs.
        """
        dataset = generate_dataset(SMALL_SPEC)
        _, heldout = split(dataset, 1)
        heldout.masks[:] = 0
        assert SMALL_SPEC.num_regions == 3
        assert heldout.num_classes == 3
        assert dataset.resolution == 16

    def test_unlabeled(self, tmp_dir):
        """Images without label maps have no class count."""
        _write_rgb(os.path.join(tmp_dir, "a.png"), np.zeros((8, 8, 3)))
        assert load_png_dir(tmp_dir, 8).num_classes is None

    def test_count_across_datasets(self):
        """The class count covers every labeled dataset."""
        dataset = generate_dataset(SMALL_SPEC)
        dataset.manifest["scene"] = None
        first, second = split(dataset, 3)
        first.masks[:] = 0
        second.masks[:] = 0
        second.masks[0, 0, 0] = 4
        assert count_classes(first, second) == 5

    def test_count_without_labels(self, tmp_dir):
        """Counting needs at least one labeled dataset."""
        _write_rgb(os.path.join(tmp_dir, "a.png"), np.zeros((8, 8, 3)))
        with pytest.raises(DataError):
            count_classes(load_png_dir(tmp_dir, 8))


class TestLoadPngDir:
    def test_mid_gray(self, tmp_dir):
        """Mid-gray maps to just above zero."""
        _write_rgb(
            os.path.join(tmp_dir, "gray.png"), np.full((8, 8, 3), 128))
        dataset = load_png_dir(tmp_dir, 8)

        assert dataset.masks is None
        assert np.allclose(dataset.images().numpy(), 128 / 127.5 - 1)
        assert float(dataset.images()[0, 0, 0, 0]) == pytest.approx(
            0.0039, abs=1e-4)

    def test_center_crop(self, tmp_dir):
        """Non-square images are cropped to a centered square."""
        pixels = np.zeros((8, 12, 3))
        pixels[:, :2] = (255, 0, 0)
        pixels[:, 2:10] = (0, 255, 0)
        pixels[:, 10:] = (0, 0, 255)
        _write_rgb(os.path.join(tmp_dir, "wide.png"), pixels)
        dataset = load_png_dir(tmp_dir, 8)

        assert dataset.pixels.shape == (1, 8, 8, 3)
        assert np.all(dataset.pixels[0] == (0, 255, 0))

    def test_resize(self, tmp_dir):
        """Images are resized to the resolution."""
        _write_rgb(
            os.path.join(tmp_dir, "large.png"), np.full((32, 32, 3), 200))
        dataset = load_png_dir(tmp_dir, 8)
        assert dataset.pixels.shape == (1, 8, 8, 3)
        assert np.all(np.abs(dataset.pixels.astype(int) - 200) <= 1)

    def test_sorted_order(self, tmp_dir):
        """Files are read in sorted order."""
        _write_rgb(os.path.join(tmp_dir, "b.png"), np.full((8, 8, 3), 10))
        _write_rgb(os.path.join(tmp_dir, "a.png"), np.full((8, 8, 3), 20))
        dataset = load_png_dir(tmp_dir, 8)
        assert dataset.pixels[0, 0, 0, 0] == 20
        assert dataset.pixels[1, 0, 0, 0] == 10

    def test_grayscale_input(self, tmp_dir):
        """Grayscale files are converted to three channels."""
        Image.fromarray(np.full((8, 8), 50, dtype=np.uint8), "L").save(
            os.path.join(tmp_dir, "gray.png"))
        dataset = load_png_dir(tmp_dir, 8)
        assert np.all(dataset.pixels == 50)

    def test_empty(self, tmp_dir, caplog):
        """An empty directory gives an empty dataset and a warning."""
        with caplog.at_level(logging.WARNING):
            dataset = load_png_dir(tmp_dir, 8)
        assert len(dataset) == 0
        assert dataset.pixels.shape == (0, 8, 8, 3)
        assert "no PNG files" in caplog.text

    def test_corrupt_file(self, tmp_dir):
        """A file that isn't a PNG is a data error naming the file."""
        path = os.path.join(tmp_dir, "broken.png")
        with open(path, "w") as file:
            file.write("not an image")
        with pytest.raises(DataError) as error:
            load_png_dir(tmp_dir, 8)
        assert "broken.png" in str(error.value)

    def test_not_a_directory(self, tmp_dir):
        """The path must be a directory."""
        with pytest.raises(DataError):
            load_png_dir(os.path.join(tmp_dir, "missing"), 8)
