"""Base classes for persistently storing data.

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
import re
import json
from typing import Dict, Iterable

from regiondiff.exceptions import FileIOError, DataError
from regiondiff.utils import atomic_write


class ConfigFile:
    """Parse a configuration file of key-value pairs.

    Attributes:
        COMMENT_REGEX: This is a regex object that represents a comment line.
        SEPARATOR: This is the string that separates keys from values in the
            config file.
        path: The path of the configuration file.
        raw_vals: A dictionary of unmodified config value strings.
    """
    COMMENT_REGEX = re.compile(r"^\s*#")
    SEPARATOR = "="

    def __init__(self, path: str) -> None:
        self.path = path
        self.raw_vals = {}

    def parse_lines(self, lines: Iterable[str]) -> None:
        """Parse lines for key-value pairs and save them in a dictionary."""
        for line in lines:
            # Skip line if it is a comment.
            if (not self.COMMENT_REGEX.search(line)
                    and self.SEPARATOR in line):
                key, value = line.partition(self.SEPARATOR)[::2]
                self.raw_vals[key.strip()] = value.strip()

    def read(self) -> None:
        """Parse the file for key-value pairs.

        Raises:
            FileIOError: The file could not be opened.
        """
        try:
            with open(self.path) as file:
                self.parse_lines(file)
        except OSError:
            raise FileIOError(
                "could not open the configuration file '{}'".format(
                    self.path))

    def write(self, vals: Dict[str, str], header="") -> None:
        """Write key-value pairs to the file in sorted order.

        Args:
            vals: The values to write.
            header: A comment to write at the top of the file.
        """
        with atomic_write(self.path, "w") as file:
            for line in header.splitlines():
                file.write("# {}".format(line).rstrip() + "\n")
            for key in sorted(vals):
                file.write(key + self.SEPARATOR + str(vals[key]) + "\n")


class JSONFile:
    """Parse a JSON-formatted file.

    Args:
        path: The path of the JSON file.

    Attributes:
        path: The path of the JSON file.
        vals: A dictionary or list of values from the file.
    """
    def __init__(self, path: str) -> None:
        self.path = path
        self.vals = None

    def read(self) -> None:
        """Read file into an object.

        Raises:
            DataError: The file is missing or isn't valid JSON.
        """
        try:
            with open(self.path) as file:
                self.vals = json.load(file)
        except OSError:
            raise DataError("could not open '{}'".format(self.path))
        except ValueError:
            raise DataError("'{}' is not valid JSON".format(self.path))

    def write(self) -> None:
        """Write object to a file.

        Keys are sorted so that identical values produce identical files.
        """
        with atomic_write(self.path, "w") as file:
            json.dump(self.vals, file, indent=4, sort_keys=True)
            file.write("\n")
