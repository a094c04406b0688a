#!/usr/bin/env python3
import inspect
import sys
import textwrap
import typing
from abc import (
    ABC,
    abstractmethod,
)
from collections.abc import Callable
from copy import deepcopy
from dataclasses import dataclass
from enum import (
    Enum,
    EnumMeta,
)
from pathlib import Path
from typing import Union

from .lib import (
    ConfigurationError,
    DelayError,
)


class Controller(ABC):
    """
    Base for the experiment runner. Each public method is one lab command:
    its docstring is the menu entry and its annotations decide how the
    command line strings are converted, so every parameter is annotated.
    Spell out Union[...] for parameters that accept more than one type.

    A check that fails is reported by raising Warning (exit status 1).
    """

    @abstractmethod
    def _post_exec(self) -> None:
        """
        Called once a command returns without raising.
        """

    @abstractmethod
    def __str__(self) -> str:
        """
        One-line outcome of the last command, printed on success.
        """
        return ""


@dataclass(kw_only=True)
class Arg:
    """A parameter of a lab command and its menu rendering."""

    name: str
    type: type
    description: str
    required: bool


@dataclass(kw_only=True)
class Command:
    """A runnable lab command; instance is None for built-ins such as help."""

    name: str
    func: Callable[..., None]
    args: list[Arg]
    doc: str
    instance: Union[Controller, None]
    visible: bool


class UI:
    """
    Dispatches one invocation (command name then positional values) to
    the matching method of a Controller.
    """

    def __init__(self, controller: Controller):
        self.controller = controller
        self.command = {}

    def populate_commands(self):
        """
        Rebuild the command table from the controller methods, plus help.
        """
        self.command = {}

        # A controller method named help replaces this entry.
        self.command["help"] = Command(
            name="help",
            func=self.help,
            args=[],
            doc=str(self.help.__doc__).strip(),
            instance=None,
            visible=True,
        )

        for name in dir(self.controller):
            if name.startswith("_"):
                continue

            attribute = getattr(self.controller, name)
            if not callable(attribute):
                continue

            # Store the plain function; the instance is passed at call time.
            func = attribute.__func__ if hasattr(attribute, "__func__") else attribute

            signature = inspect.signature(func)
            type_hints = typing.get_type_hints(func)
            parameters = list(signature.parameters.values())[1:]

            args = []
            for param in parameters:
                required = False
                description = f"[{param.name}]"
                if param.default == param.empty:
                    description = f"<{param.name}>"
                    required = True

                if t := type_hints.get(param.name, None):
                    # Enums show the values they accept as (a|b|c).
                    if isinstance(t, EnumMeta):
                        description = "(" + "|".join([e.value for e in t]) + ")"
                    elif t is bool:
                        description = f"[{param.name}=(true|false)]"

                args.append(
                    Arg(
                        name=param.name,
                        type=type_hints.get(param.name, str),
                        description=description,
                        required=required,
                    )
                )

            self.command[name] = Command(
                name=name,
                func=func,
                args=args,
                doc=str(func.__doc__).strip(),
                instance=self.controller,
                visible=True,
            )

    def help(self):
        """
        Show this menu
        """
        names = []
        usages = []
        summaries = []

        for name, command in sorted(self.command.items()):
            if not command.visible:
                continue
            names.append(name)
            usages.append(" ".join([arg.description for arg in command.args]))
            summaries.append(command.doc)

        name_width = max(map(len, names)) + 1
        usage_width = max(map(len, usages)) + 1

        out = "\n"
        for name, usage, summary in zip(names, usages, summaries):
            line = name.ljust(name_width) + usage.ljust(usage_width)
            # Collapse docstring whitespace.
            summary = " ".join(summary.split())
            out += (
                textwrap.fill(
                    line + summary,
                    subsequent_indent=" " * (name_width + usage_width),
                    width=100,
                )
                + "\n"
            )
        print(out)

    def cast_to_type(self, arg: str, target_type: typing.Type):
        """
        Convert one command line string to the annotated parameter type.
        Enum members are looked up by name, so both "paths-csv" and
        "PATHS_CSV" spellings resolve.
        """

        def _cast(argument: str, T: typing.Type):
            if T is bool:
                if argument.lower() in ("true", "false"):
                    return argument.lower() == "true"
                # Only an explicit "true" or "false" is accepted.
                raise ValueError(f"Could not convert {argument} to bool")

            if isinstance(T, type) and issubclass(T, Enum):
                return T[argument.upper().replace("-", "_")]

            if T is Path:
                return Path(argument)

            return T(argument)

        # Union annotations take the first member that converts.
        if hasattr(target_type, "__args__"):
            for t in target_type.__args__:
                try:
                    return _cast(arg, t)
                except (KeyError, ValueError):
                    pass
            raise ValueError(f"Could not cast {arg} to any {target_type}")

        return _cast(arg, target_type)

    def run(self, argv: list[str]) -> int:
        """
        Execute one command. Returns 0 on success, 1 when the command
        raised a Warning and 2 for usage or configuration errors.
        """
        self.populate_commands()
        if not argv:
            self.help()
            return 2

        func, args = argv[0], list(argv[1:])
        if not (command := self.command.get(func, None)):
            print(f"unknown command {func}", file=sys.stderr)
            self.help()
            return 2

        num_required_args = len([arg for arg in command.args if arg.required])
        if len(args) < num_required_args or len(args) > len(command.args):
            print(
                f"{func} expected between {num_required_args} and {len(command.args)} "
                f"arg(s) but received {len(args)}",
                file=sys.stderr,
            )
            return 2

        expected_args = deepcopy(command.args)
        try:
            prepared_args = [
                self.cast_to_type(arg, expected.type)
                for arg, expected in zip(args, expected_args)
            ]
        except (ValueError, KeyError) as e:
            print(f"arg was unexpected type: {e}", file=sys.stderr)
            return 2

        if command.instance is not None:
            # Functions were stored unbound.
            prepared_args.insert(0, command.instance)

        try:
            command.func(*prepared_args)
        except Warning as warning:
            print(f"\n{warning}", file=sys.stderr)
            return 1
        except ConfigurationError as error:
            print(f"configuration error: {error}", file=sys.stderr)
            return 2
        except DelayError as error:
            print(f"\n{type(error).__name__}: {error}", file=sys.stderr)
            return 1

        if command.instance is not None:
            command.instance._post_exec()
            print(command.instance)
        return 0
