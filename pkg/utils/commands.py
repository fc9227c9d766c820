import inspect
import json
import logging
import sys
from argparse import ArgumentParser, Namespace
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any, NamedTuple

import yaml
from pydantic import ValidationError

from utils.exceptions import (
    CommandError,
    ConfigInvalidError,
    MissingCommandParameterAnnotationError,
    MissingCommandParameterError,
    MissingInputError,
)

logger = logging.getLogger(__name__)


class Argument(NamedTuple):
    flags: tuple[str, ...]
    options: dict[str, Any]


def argument(*flags: str, **options: Any) -> Argument:
    """Declare a command-specific flag, with the same arguments as ``add_argument``."""
    return Argument(flags, options)


class Command(NamedTuple):
    name: str
    function: Callable[..., None]
    config_class: type
    help: str
    arguments: tuple[Argument, ...]


COMMANDS: dict[str, Command] = {}


def command(
    name: str | None = None, help: str = "", arguments: Sequence[Argument] = ()
) -> Callable[[Callable[..., None]], Callable[..., None]]:
    """Decorator that registers a function as a CLI sub-command.

    The decorated function's first parameter must be annotated with a config class that has a
    ``from_yaml`` class method; the second receives the parsed command-line namespace. At
    runtime the dispatcher loads ``--config <path>`` into the annotated class and calls the
    function with it.

    Args:
        name (str | None): Sub-command name; the function name when omitted.
        help (str): One-line description shown by ``--help``.
        arguments (Sequence[Argument]): Command-specific flags.

    Returns:
        Callable: A decorator returning the function unchanged after registration.
    """

    def register(function: Callable[..., None]) -> Callable[..., None]:
        parameters = dict(inspect.signature(function).parameters)
        if parameters and next(iter(parameters)) == "self":
            del parameters["self"]
        if not parameters:
            raise MissingCommandParameterError()
        _, config_param = next(iter(parameters.items()))
        if config_param.annotation is inspect.Parameter.empty:
            raise MissingCommandParameterAnnotationError()
        config_class = config_param.annotation
        if getattr(config_class, "from_yaml", None) is None:
            raise TypeError(
                f"The target config class {config_class} does not have a from_yaml method."
            )

        command_name = name or function.__name__
        COMMANDS[command_name] = Command(
            command_name, function, config_class, help, tuple(arguments)
        )
        return function

    return register


def build_parser(
    prog: str, common: Sequence[Argument] = (), commands: dict[str, Command] | None = None
) -> ArgumentParser:
    """One sub-parser per registered command, each with ``--config`` and the common flags."""
    parser = ArgumentParser(prog=prog)
    subparsers = parser.add_subparsers(dest="command", required=True)
    for cmd in (commands or COMMANDS).values():
        sub = subparsers.add_parser(cmd.name, help=cmd.help, description=cmd.help)
        sub.add_argument("--config", type=Path, help="Path to the config file")
        for arg in (*common, *cmd.arguments):
            sub.add_argument(*arg.flags, **arg.options)
    return parser


def error_line(kind: str, command_name: str, error: BaseException) -> str:
    """The single machine-parsable line written to stderr on failure."""
    message = " ".join(str(error).split()) or type(error).__name__
    return f"error={kind} command={command_name} message={json.dumps(message)}"


def load_config(config_class: type, path: Path | None) -> Any:
    """Load a command's config, mapping file and validation problems to command errors.

    Raises:
        MissingInputError: If the config file does not exist.
        ConfigInvalidError: If the file is not valid YAML or fails validation.
    """
    default = getattr(config_class, "DEFAULT_CONFIG_PATH", None)
    if path is None and (default is None or not Path(default).exists()):
        logger.info("No config file given; using %s defaults.", config_class.__name__)
        return config_class()
    try:
        return config_class.from_yaml(path)
    except FileNotFoundError as e:
        raise MissingInputError(f"Config file not found: {e.filename}") from e
    except (yaml.YAMLError, ValidationError, ValueError) as e:
        raise ConfigInvalidError(f"Invalid config {path}: {e}") from e


def dispatch(
    args: Namespace,
    classify: Callable[[BaseException], CommandError | None] | None = None,
    commands: dict[str, Command] | None = None,
) -> int:
    """Run the command named in ``args`` and return the process exit code.

    ``classify`` maps domain exceptions to command errors; unmapped exceptions propagate.
    """
    cmd = (commands or COMMANDS)[args.command]
    logger.info("Running command %s", cmd.name)
    try:
        config = load_config(cmd.config_class, args.config)
        cmd.function(config, args)
    except Exception as e:
        error = e if isinstance(e, CommandError) else (classify(e) if classify else None)
        if error is None:
            raise
        logger.debug("Command %s failed", cmd.name, exc_info=True)
        print(error_line(error.kind, cmd.name, error), file=sys.stderr)
        return error.exit_code
    return 0
