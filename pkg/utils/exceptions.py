class MissingCommandParameterError(Exception):
    def __init__(self, *args, **kwargs):
        message = "Command functions must have at least one argument, the config object."
        super().__init__(message, *args, **kwargs)


class MissingCommandParameterAnnotationError(Exception):
    def __init__(self, *args, **kwargs):
        message = "First argument of command function must be annotated with target config class."
        super().__init__(message, *args, **kwargs)


class CommandError(Exception):
    """A command failure reported on stderr with a fixed exit code."""

    exit_code: int = 1
    kind: str = "error"


class MissingInputError(CommandError):
    exit_code = 2
    kind = "missing_input"


class ConfigInvalidError(CommandError):
    exit_code = 3
    kind = "config_invalid"


class ProviderExitError(CommandError):
    exit_code = 4
    kind = "provider_failure"


class PartialRunError(CommandError):
    exit_code = 5
    kind = "partial_run"

    def __init__(self, message: str, manifest: str | None = None):
        suffix = f" (manifest: {manifest})" if manifest else ""
        super().__init__(f"{message}{suffix}")
        self.manifest = manifest
