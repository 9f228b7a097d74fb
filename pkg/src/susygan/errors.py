"""Exception hierarchy shared by all susygan modules."""


class SusyGanError(Exception):
    """Base class for every error raised by the package."""


class InvalidArgument(SusyGanError, ValueError):
    pass


class DegenerateInput(SusyGanError, ValueError):
    """Input is valid in shape but carries no usable signal (e.g. an all-zero grid)."""


class FormatError(SusyGanError):
    """A binary file could not be parsed."""


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class TruncatedFile(FormatError):
    def __init__(self, message, sample_index=None):
        super().__init__(message)
        self.sample_index = sample_index


class SpecError(SusyGanError, ValueError):
    """Layer stack does not chain, or a layer parameter is out of range."""

    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class ContractError(SusyGanError):
    """Caller broke a pre-condition between paired calls (forward/backward, checkpoint/net)."""


class NumericFault(SusyGanError, FloatingPointError):
    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class IllConditioned(SusyGanError, ValueError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class ConfigError(SusyGanError, ValueError):
    pass
