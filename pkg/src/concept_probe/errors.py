"""Error categories that map onto CLI exit codes."""


class ProbeError(Exception):
    exit_code = 1


class ConfigError(ProbeError):
    exit_code = 2


class DataError(ProbeError):
    exit_code = 3


class NumericError(ProbeError):
    exit_code = 4
