"""Argparse utilities."""
from argparse import ArgumentTypeError
from ast import literal_eval
from typing import Any, Tuple


def parse_kwargs(kwargs_str) -> Tuple[str, Any]:
    """Parse a key-value pair separated by '='."""
    key, value = kwargs_str.split("=", 1)
    return key.strip(), literal_eval(value.strip())


def str2bool(value) -> bool:
    """Parse boolean flag values like yes/no, true/false, 1/0."""
    if isinstance(value, bool):
        return value
    if value.lower() in ("yes", "true", "t", "y", "1"):
        return True
    if value.lower() in ("no", "false", "f", "n", "0"):
        return False
    raise ArgumentTypeError(f"Boolean value expected, got {value!r}")


def positive_int(value) -> int:
    """Parse a strictly positive integer flag."""
    number = int(value)
    if number < 1:
        raise ArgumentTypeError(f"Positive integer expected, got {value!r}")
    return number
