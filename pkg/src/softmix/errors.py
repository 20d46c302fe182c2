"""Exception hierarchy. Each class carries the process exit code the CLI uses."""


class SoftmixError(Exception):
    exit_code = 1


class UsageError(SoftmixError):
    """Bad command-line usage or missing inputs."""

    exit_code = 2


class InputError(SoftmixError):
    """A value violates an operation's preconditions."""

    exit_code = 3


class FormatError(SoftmixError):
    """A file or string does not follow its declared format."""

    exit_code = 4


class NumericalError(SoftmixError):
    """Non-finite values encountered; training or inference aborted."""

    exit_code = 5
