import argparse
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

from pydantic import ValidationError

from services.errors import BridgeAttentionError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2

Handler = Callable[[argparse.Namespace], Optional[int]]


@dataclass
class Argument:
    flags: tuple[str, ...]
    options: dict[str, Any] = field(default_factory=dict)


def argument(*flags: str, **options: Any) -> Argument:
    return Argument(flags, options)


@dataclass
class Command:
    name: str
    help: str
    handler: Handler
    arguments: Sequence[Argument] = ()


class Router:
    """
    Набор подкоманд одного раздела CLI
    """

    def __init__(self) -> None:
        self.commands: list[Command] = []

    def command(
        self,
        name: str,
        help: str = "",
        arguments: Sequence[Argument] = ()
    ) -> Callable[[Handler], Handler]:
        def decorator(handler: Handler) -> Handler:
            self.commands.append(Command(name, help, handler, arguments))
            return handler
        return decorator


class Dispatcher:
    def __init__(self, prog: str = "bridge-attention") -> None:
        self.prog = prog
        self.routers: list[Router] = []

    def include_router(self, router: Router) -> None:
        self.routers.append(router)

    def build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(prog=self.prog)
        subparsers = parser.add_subparsers(dest="command", required=True)
        for router in self.routers:
            for command in router.commands:
                sub = subparsers.add_parser(command.name, help=command.help)
                for arg in command.arguments:
                    sub.add_argument(*arg.flags, **arg.options)
                sub.set_defaults(handler=command.handler)
        return parser

    def feed(self, argv: Optional[Sequence[str]] = None) -> int:
        """
        Разобрать аргументы и выполнить подкоманду, вернуть код выхода
        """

        parser = self.build_parser()
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:
            # argparse завершает работу сам: 0 для --help, 2 для ошибок
            return e.code if isinstance(e.code, int) else EXIT_USAGE

        try:
            code = args.handler(args)
        except ValidationError as e:
            logger.error(f"Некорректные параметры: {e}")
            return EXIT_USAGE
        except BridgeAttentionError as e:
            logger.error(f"Ошибка {args.command}: {e}")
            return EXIT_CHECK_FAILED
        return EXIT_OK if code is None else code
