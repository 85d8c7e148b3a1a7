"""Parse command-line arguments and run the program.

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
import sys
import signal
import logging
import argparse
import importlib.metadata
from typing import List, Optional

from linotype import Item, DefStyle

from regiondiff.commandbase import Command
from regiondiff.config import load_config
from regiondiff.exceptions import ProgramError, InputError
from regiondiff.commands.ablate import AblateCommand
from regiondiff.commands.eval import EvalCommand
from regiondiff.commands.generate import GenerateCommand
from regiondiff.commands.makedata import MakeDataCommand
from regiondiff.commands.segment import SegmentCommand
from regiondiff.commands.train import TrainCommand


def main_help_item() -> Item:
    """Structure the main help message.

    Returns:
        An Item object with the message.
    """
    root_item = Item()

    usage = root_item.add_text("Usage:")
    usage.add_def(
        "regiondiff", "[global_options] command [command_args]", "")
    root_item.add_text("\n")

    global_opts = root_item.add_text("Global Options:", item_id="global_opts")
    global_opts.formatter.def_style = DefStyle.ALIGNED
    global_opts.add_def(
        "    --help", "",
        "Print a usage message and exit.")
    global_opts.add_def(
        "    --version", "",
        "Print the version number and exit.")
    global_opts.add_def(
        "    --debug", "",
        "Print a full stack trace instead of an error message if an error "
        "occurs, and log debugging messages.")
    global_opts.add_def(
        "-q, --quiet", "",
        "Suppress all non-error output, including progress bars.")
    root_item.add_text("\n")

    common_opts = root_item.add_text(
        "Common Command Options:", item_id="common_opts")
    common_opts.formatter.def_style = DefStyle.ALIGNED
    common_opts.add_def(
        "-c, --config", "file",
        "Read settings from file, a list of key=value lines.")
    common_opts.add_def(
        "-s, --set", "key=value",
        "Override a single setting. May be given more than once.")
    common_opts.add_def(
        "    --seed", "n",
        "Seed every random stream with n.")
    common_opts.add_def(
        "-o, --out", "dir",
        "Write outputs to the run directory dir.")
    common_opts.add_def(
        "    --deterministic", "",
        "Use only deterministic kernels so that runs are reproducible "
        "bit for bit.")
    root_item.add_text("\n")

    commands = root_item.add_text("Commands:", item_id="commands")
    commands.add_def(
        "train", "[options]",
        "Train a model on synthetic scenes or a directory of images.")
    commands.add_text("\n")
    commands.add_def(
        "segment", "[options] dir",
        "Segment the images in dir with a trained model.")
    commands.add_text("\n")
    commands.add_def(
        "generate", "[options]",
        "Generate images together with their region masks.")
    commands.add_text("\n")
    commands.add_def(
        "eval", "[options]",
        "Score segmentations of held-out images and the consistency of "
        "generated masks.")
    commands.add_text("\n")
    commands.add_def(
        "ablate", "[options]",
        "Train and compare every decoding scheme under the same budget.")
    commands.add_text("\n")
    commands.add_def(
        "make-data", "[options]",
        "Write a dataset of synthetic scenes with their label maps.")

    return root_item


def command_help_item() -> Item:
    """Structure the help message for each command.

    Returns:
        An Item object with the message.
    """
    root_item = Item()

    train_item = root_item.add_def(
        "train", "[options]",
        "Train a model, writing checkpoints and a loss log to the run "
        "directory. Training resumes from the latest checkpoint in the run "
        "directory.", item_id="train")
    train_item.add_text("\n")
    train_item.add_def(
        "-d, --data", "source",
        "Train on source, which is either 'synthetic' or a directory of PNG "
        "files. This sets **data.source**.", item_id="data")
    root_item.add_text("\n")

    segment_item = root_item.add_def(
        "segment", "[options] dir",
        "Segment the PNG files in dir with one denoising pass each and write "
        "indexed masks and a montage.", item_id="segment")
    segment_item.add_text("\n")
    segment_item.add_def(
        "-k, --checkpoint", "file",
        "Load the model from file instead of the latest checkpoint in the "
        "run directory.", item_id="checkpoint")
    root_item.add_text("\n")

    generate_item = root_item.add_def(
        "generate", "[options]",
        "Generate images from pure noise and write them with the masks "
        "predicted at the final step.", item_id="generate")
    generate_item.add_text("\n")
    generate_item.add_def(
        "-k, --checkpoint", "file",
        "Load the model from file instead of the latest checkpoint in the "
        "run directory.")
    generate_item.add_text("\n")
    generate_item.add_def(
        "-n, --num-samples", "n",
        "Generate n samples instead of **eval.num_generated**.",
        item_id="num-samples")
    generate_item.add_text("\n")
    generate_item.add_def(
        "-t, --trajectory", "",
        "Also write the images and masks of a few samples at every "
        "**io.record_every** steps.", item_id="trajectory")
    root_item.add_text("\n")

    eval_item = root_item.add_def(
        "eval", "[options]",
        "Score one-step segmentations of the held-out images and the "
        "consistency of generated masks with a supervised reference "
        "segmenter.", item_id="eval")
    eval_item.add_text("\n")
    eval_item.add_def(
        "-k, --checkpoint", "file",
        "Load the model from file instead of the latest checkpoint in the "
        "run directory.")
    eval_item.add_text("\n")
    eval_item.add_def(
        "-d, --data", "dir",
        "Evaluate on the labeled dataset in dir instead of the held-out "
        "split.")
    root_item.add_text("\n")

    ablate_item = root_item.add_def(
        "ablate", "[options]",
        "Train every decoding scheme under the same seed and budget and "
        "print a comparison of held-out IoU and validation loss.",
        item_id="ablate")
    ablate_item.add_text("\n")
    ablate_item.add_def(
        "-v, --variants", "list",
        "Compare only the comma-separated decoding schemes in list.",
        item_id="variants")
    root_item.add_text("\n")

    makedata_item = root_item.add_def(
        "make-data", "[options]",
        "Generate synthetic scenes and write them as a dataset directory.",
        item_id="make-data")
    makedata_item.add_text("\n")
    makedata_item.add_def(
        "-O, --output", "dir",
        "Write the dataset to dir instead of the run directory.",
        item_id="output")

    return root_item


class CustomArgumentParser(argparse.ArgumentParser):
    """Set custom formatting of error messages for argparse."""
    def error(self, message) -> None:
        raise InputError(message)


class HelpAction(argparse.Action):
    """Handle the '--help' flag."""
    def __init__(self, nargs=0, **kwargs) -> None:
        super().__init__(nargs=nargs, **kwargs)

    def __call__(self, parser, namespace, values, option_string=None) -> None:
        if getattr(namespace, "command", None):
            print(command_help_item().format(item_id=namespace.command))
        else:
            print(main_help_item().format())
        parser.exit()


class VersionAction(argparse.Action):
    """Handle the '--version' flag."""
    def __init__(self, nargs=0, **kwargs) -> None:
        super().__init__(nargs=nargs, **kwargs)

    def __call__(self, parser, namespace, values, option_string=None) -> None:
        print("regiondiff", importlib.metadata.version("regiondiff"))
        parser.exit()


class QuietAction(argparse.Action):
    """Handle the '--quiet' flag."""
    def __init__(self, nargs=0, **kwargs) -> None:
        super().__init__(nargs=nargs, **kwargs)

    def __call__(self, parser, namespace, values, option_string=None) -> None:
        sys.stdout = open(os.devnull, "a")
        namespace.quiet = True


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """Create a dictionary of parsed command-line arguments.

    Returns:
        A namepsace of command-line argument names and their values.
    """
    parser = CustomArgumentParser(prog="regiondiff", add_help=False)
    parser.add_argument("--help", action=HelpAction)
    parser.add_argument("--version", action=VersionAction)
    parser.add_argument("--debug", action="store_true")
    parser.add_argument("--quiet", "-q", action=QuietAction, default=False)

    common = CustomArgumentParser(add_help=False)
    common.add_argument("--help", action=HelpAction)
    common.add_argument("--config", "-c")
    common.add_argument(
        "--set", "-s", action="append", default=[], dest="overrides")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", "-o")
    common.add_argument("--deterministic", action="store_true", default=None)

    subparsers = parser.add_subparsers(dest="command")
    subparsers.required = True

    parser_train = subparsers.add_parser(
        "train", add_help=False, parents=[common])
    parser_train.add_argument("--data", "-d")
    parser_train.set_defaults(command="train")

    parser_segment = subparsers.add_parser(
        "segment", add_help=False, parents=[common])
    parser_segment.add_argument("--checkpoint", "-k")
    parser_segment.add_argument("input_dir", metavar="dir")
    parser_segment.set_defaults(command="segment")

    parser_generate = subparsers.add_parser(
        "generate", add_help=False, parents=[common])
    parser_generate.add_argument("--checkpoint", "-k")
    parser_generate.add_argument("--num-samples", "-n", type=int)
    parser_generate.add_argument("--trajectory", "-t", action="store_true")
    parser_generate.set_defaults(command="generate")

    parser_eval = subparsers.add_parser(
        "eval", add_help=False, parents=[common])
    parser_eval.add_argument("--checkpoint", "-k")
    parser_eval.add_argument("--data", "-d")
    parser_eval.set_defaults(command="eval")

    parser_ablate = subparsers.add_parser(
        "ablate", add_help=False, parents=[common])
    parser_ablate.add_argument("--variants", "-v")
    parser_ablate.set_defaults(command="ablate")

    parser_makedata = subparsers.add_parser(
        "make-data", add_help=False, parents=[common])
    parser_makedata.add_argument("--output", "-O")
    parser_makedata.set_defaults(command="make-data")

    return parser.parse_args(argv)


def configure_logging(debug: bool) -> None:
    """Send log records from the library modules to stderr."""
    logging.basicConfig(
        level=logging.DEBUG if debug else logging.WARNING,
        format="%(levelname)s: %(name)s: %(message)s")


def def_command(cmd_args) -> Command:
    """Get an Command subclass instance from the command-line input."""
    flags = {
        "seed": cmd_args.seed,
        "out": cmd_args.out,
        "deterministic": cmd_args.deterministic}
    if cmd_args.command == "train" and cmd_args.data is not None:
        flags["data.source"] = cmd_args.data
    config = load_config(cmd_args.config, cmd_args.overrides, **flags)
    progress = not cmd_args.quiet

    if cmd_args.command == "train":
        return TrainCommand(config, progress=progress)
    elif cmd_args.command == "segment":
        return SegmentCommand(
            config, cmd_args.checkpoint, cmd_args.input_dir,
            progress=progress)
    elif cmd_args.command == "generate":
        return GenerateCommand(
            config, cmd_args.checkpoint, cmd_args.num_samples,
            cmd_args.trajectory, progress=progress)
    elif cmd_args.command == "eval":
        return EvalCommand(
            config, cmd_args.checkpoint, cmd_args.data, progress=progress)
    elif cmd_args.command == "ablate":
        variants = None
        if cmd_args.variants:
            variants = [
                variant.strip() for variant in cmd_args.variants.split(",")]
        return AblateCommand(config, variants, progress=progress)
    elif cmd_args.command == "make-data":
        return MakeDataCommand(config, cmd_args.output, progress=progress)


def main(argv: Optional[List[str]] = None) -> int:
    """Start the program.

    Returns:
        0 on success, otherwise the exit code of the error.
    """
    try:
        # Exit properly on SIGTERM, SIGHUP or SIGINT.
        signal.signal(signal.SIGTERM, signal_exception_handler)
        signal.signal(signal.SIGHUP, signal_exception_handler)
        signal.signal(signal.SIGINT, signal_exception_handler)

        cmd_args = parse_args(argv)
        configure_logging(cmd_args.debug)
        command = def_command(cmd_args)
        command.main()
    except ProgramError as error:
        try:
            if cmd_args.debug:
                raise
        except NameError:
            pass
        for message in error.args:
            print("Error: {}".format(message), file=sys.stderr)
        return error.exit_code
    return 0


def signal_exception_handler(signum: int, frame) -> None:
    """Raise an exception with error message for an interruption by signal."""
    raise ProgramError("program received " + signal.Signals(signum).name)
