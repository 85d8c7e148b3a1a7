"""Program-wide exceptions.

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


class ProgramError(Exception):
    """Base exception for errors anticipated during normal operation."""
    exit_code = 1


class InputError(ProgramError):
    """Raised whenever input is invalid."""
    exit_code = 2


class ConfigError(InputError):
    """Raised whenever a configuration value is invalid.

    Attributes:
        field: The name of the offending configuration field, if known.
    """
    def __init__(self, *args, field=None) -> None:
        super().__init__(*args)
        self.field = field


class RangeError(ProgramError):
    """Raised whenever a value falls outside of its permitted range."""
    exit_code = 2


class ShapeError(ProgramError):
    """Raised whenever a tensor doesn't have the expected shape."""
    exit_code = 2


class ContractError(ProgramError):
    """Raised whenever a caller violates the contract of an operation."""
    exit_code = 4


class NumericalError(ProgramError):
    """Raised whenever a computation produces non-finite values.

    Attributes:
        snapshot: A dict of diagnostic values captured at the time of failure.
    """
    exit_code = 4

    def __init__(self, *args, snapshot=None) -> None:
        super().__init__(*args)
        self.snapshot = snapshot or {}


class FileIOError(ProgramError):
    """Raised whenever there is an issue reading or writing a file."""
    exit_code = 3


class DataError(FileIOError):
    """Raised whenever an image or dataset file is unreadable or malformed."""


class CheckpointError(FileIOError):
    """Raised whenever there is an issue with a checkpoint file."""


class VersionMismatchError(CheckpointError):
    """Raised whenever a checkpoint was written in an unsupported format."""


class ShapeMismatchError(CheckpointError):
    """Raised whenever a stored tensor doesn't match the model architecture."""


class TruncatedFileError(CheckpointError):
    """Raised whenever a checkpoint file is shorter or longer than declared."""
