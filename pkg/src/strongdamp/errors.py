"""Shared exception taxonomy.

ConfigError covers everything wrong with user-supplied definitions
(expressions, problem files, run configs); NumericalError covers failures
arising during computation (instability, singular coefficients, timeouts).
The CLI maps the two branches to distinct exit codes.
"""


class StrongdampError(Exception):
    pass


class ConfigError(StrongdampError):
    pass


class NumericalError(StrongdampError):
    pass
