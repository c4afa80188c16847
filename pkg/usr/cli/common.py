import argparse
import io
import sys
from collections.abc import Mapping
from os import getenv
from typing import Any

from usr.errors import UsageError


class UsageParser(argparse.ArgumentParser):
    """
    ArgumentParser whose usage failures raise ``UsageError`` (exit code 1)
    instead of exiting with argparse's own status
    """

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f'{self.prog}: {message}')


def positive_int(arg):
    try:
        value = int(arg)
    except ValueError:
        raise argparse.ArgumentTypeError(f'"{arg}" is not an integer')
    if value < 1:
        raise argparse.ArgumentTypeError(f'"{arg}" must be >= 1')
    return value


def format_default(default: Any):
    """
    Render a flag default for --help; sequences become space separated like they are typed
    """
    if isinstance(default, io.IOBase):
        return default.name
    if isinstance(default, str):
        return f'"{default}"'
    if isinstance(default, bool):
        return str(default)
    if isinstance(default, int):
        return f'{default:,}'
    if isinstance(default, float):
        return f'{default:g}'
    if isinstance(default, Mapping):
        return '{mapping}'
    if isinstance(default, (list, tuple)):
        return ' '.join(str(d) for d in default)
    return str(default)


def env_flag(name: str, convert=str):
    """
    Default of a flag read from $name, passed through the flag's own ``convert``.
    Unset or blank leaves the flag at None; a malformed value is a usage error.
    """
    value = getenv(name, '').strip()
    if not value:
        return None
    try:
        return convert(value)
    except (argparse.ArgumentTypeError, ValueError) as e:
        raise UsageError(f'${name}: {e}')


def nested(**sections) -> dict:
    """
    Build a RunConfig override document from flag values, dropping flags
    that were not given::

        nested(seed=7, data={'count': None, 'mode': 'bn'}) -> {'seed': 7, 'data': {'mode': 'bn'}}
    """
    out = {}
    for key, value in sections.items():
        if isinstance(value, Mapping):
            value = nested(**value)
            if value:
                out[key] = value
        elif value is not None:
            out[key] = value
    return out
