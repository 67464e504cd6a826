from __future__ import annotations


class LabError(Exception):
    """Base error. ``code`` is the stable machine-readable error name."""

    exit_code = 1

    def __init__(self, code: str, detail: str = ""):
        self.code = code
        self.detail = detail
        super().__init__(f"{code}: {detail}" if detail else code)


class ConfigError(LabError):
    exit_code = 2


class DataError(LabError):
    exit_code = 3


class NumericError(LabError):
    exit_code = 4
