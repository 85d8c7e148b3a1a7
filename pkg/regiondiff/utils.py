"""A collection of miscellaneous utilities.

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
import re
import random
import tempfile
import contextlib
from typing import Any, Generator, IO, List, Sequence

import numpy as np
import torch

from regiondiff.exceptions import FileIOError


def seed_everything(seed: int, deterministic=False) -> torch.Generator:
    """Seed every global random number generator.

    Args:
        seed: The seed to use.
        deterministic: Restrict torch to deterministic kernels so that forward
            passes and training runs are bitwise reproducible.

    Returns:
        A fresh torch generator seeded with the same seed.
    """
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        # Required by some CUDA kernels when deterministic algorithms are on.
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


@contextlib.contextmanager
def atomic_write(path: str, mode="wb") -> Generator[IO, None, None]:
    """Write a file by writing a temporary file and renaming it.

    The destination is never left partially written. The temporary file is
    created in the same directory so that the rename doesn't cross
    filesystem boundaries.

    Args:
        path: The path of the file to write.
        mode: The mode to open the temporary file with.

    Raises:
        FileIOError: The file could not be written.
    """
    dir_path = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(dir_path, exist_ok=True)
        fd, tmp_path = tempfile.mkstemp(
            prefix=".tmp-", dir=dir_path)
    except OSError as e:
        raise FileIOError("could not write '{0}': {1}".format(
            path, e.strerror))

    try:
        with os.fdopen(fd, mode) as file:
            yield file
            file.flush()
            os.fsync(file.fileno())
        os.replace(tmp_path, path)
    except OSError as e:
        with contextlib.suppress(OSError):
            os.remove(tmp_path)
        raise FileIOError("could not write '{0}': {1}".format(
            path, e.strerror))
    except BaseException:
        with contextlib.suppress(OSError):
            os.remove(tmp_path)
        raise


class DictProperty:
    """A property that reads and writes individual keys of a mapping."""
    class _Proxy:
        def __init__(self, obj, fget, fset):
            self._obj = obj
            self._fget = fget
            self._fset = fset

        def __getitem__(self, key):
            return self._fget(self._obj, key)

        def __setitem__(self, key, value):
            if self._fset is None:
                raise TypeError("can't set item")
            self._fset(self._obj, key, value)

    def __init__(self, fget, fset=None, doc=None):
        self._fget = fget
        self._fset = fset
        self.__doc__ = doc or fget.__doc__

    def __get__(self, obj, objtype=None):
        if obj is None:
            return self
        return self._Proxy(obj, self._fget, self._fset)

    def setter(self, fset):
        return type(self)(self._fget, fset, self.__doc__)


def format_cell(value: Any) -> str:
    """Format a single table cell.

    Floats are printed with four decimal places, None as a dash and
    everything else with str().
    """
    if value is None:
        return "-"
    if isinstance(value, float):
        return "{0:.4f}".format(value)
    return str(value)


class BoxTable:
    """Format a table using box-drawing characters.

    This table allows for ANSI escape codes in the data. Each row must have
    the same number of columns. The contents of each row are left-aligned.
    Empty rows are converted to horizontal separators.

    Attributes:
        data: The table data, where each item is a row in the table. The first
            row makes up the table headers. Cells that aren't strings are
            formatted with format_cell().
    """
    HORIZONTAL_CHAR = "─"
    VERTICAL_CHAR = "│"
    TOP_RIGHT_CHAR = "┐"
    TOP_LEFT_CHAR = "┌"
    BOTTOM_RIGHT_CHAR = "┘"
    BOTTOM_LEFT_CHAR = "└"
    CROSS_CHAR = "┼"
    TOP_TEE_CHAR = "┬"
    BOTTOM_TEE_CHAR = "┴"
    LEFT_TEE_CHAR = "├"
    RIGHT_TEE_CHAR = "┤"
    ANSI_REGEX = re.compile("(\x1b\\[[0-9;]+m)")
    HEADER_ANSI = ("\x1b[1m", "\x1b[0m")

    def __init__(self, data: Sequence[Sequence[Any]]):
        if not all(len(row) == len(data[0]) for row in data):
            raise ValueError("each row must be the same length")
        self.data = [
            tuple(
                cell if isinstance(cell, str) else format_cell(cell)
                for cell in row)
            for row in data]
        self._lengths = self._get_column_lengths()

    def _get_column_lengths(self) -> List[int]:
        """Get the length of each column in the table."""
        lengths = []
        for column in zip(*self.data):
            visible_column = [self.ANSI_REGEX.sub("", item) for item in column]
            lengths.append(len(max(visible_column, key=len)))
        return lengths

    def _get_separator(self) -> List[str]:
        """Get the inside portion of a separator row."""
        return [self.HORIZONTAL_CHAR * (length+2) for length in self._lengths]

    def _format_top_separator(self) -> str:
        """Format the top border of the table."""
        return (
            self.TOP_LEFT_CHAR
            + self.TOP_TEE_CHAR.join(self._get_separator())
            + self.TOP_RIGHT_CHAR)

    def _format_bottom_separator(self) -> str:
        """Format the bottom border of the table."""
        return (
            self.BOTTOM_LEFT_CHAR
            + self.BOTTOM_TEE_CHAR.join(self._get_separator())
            + self.BOTTOM_RIGHT_CHAR)

    def _format_inside_separator(self) -> str:
        """Format the row separator."""
        return (
            self.LEFT_TEE_CHAR
            + self.CROSS_CHAR.join(self._get_separator())
            + self.RIGHT_TEE_CHAR)

    def _format_row(self) -> Generator[str, None, None]:
        """Format a row containing data."""
        for row in self.data:
            if not any(row):
                yield self._format_inside_separator()
            else:
                # str.format() can't be used for padding because it doesn't
                # ignore ANSI escape sequences.
                padding = [
                    length - len(self.ANSI_REGEX.sub("", text))
                    for text, length in zip(row, self._lengths)]
                inside = " {} ".format(self.VERTICAL_CHAR).join(
                    text + " "*spaces for text, spaces in zip(row, padding))

                yield (
                    self.VERTICAL_CHAR
                    + " " + inside + " "
                    + self.VERTICAL_CHAR)

    def format(self, bold_header=True) -> str:
        """Format the table data into a string.

        Args:
            bold_header: Wrap the header row in ANSI bold escape codes. Turn
                this off when writing the table to a file.

        Returns:
            The table as a string.
        """
        data_rows = self._format_row()
        header = next(data_rows)
        if bold_header:
            header = header.join(self.HEADER_ANSI)
        table_lines = [
            self._format_top_separator(),
            header,
            self._format_inside_separator(),
            *data_rows,
            self._format_bottom_separator()]

        return "\n".join(table_lines)
