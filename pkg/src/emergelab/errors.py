"""Exception hierarchy shared by every emergelab module."""


class EmergeLabError(Exception):
    """Base class for all errors raised by emergelab."""


class DimensionError(EmergeLabError, ValueError):
    pass


class ContractError(EmergeLabError, ValueError):
    pass


class GenerationError(EmergeLabError, RuntimeError):
    pass


class FormatError(EmergeLabError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(EmergeLabError, ValueError):
    pass


class VocabularyError(EmergeLabError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class TrainingError(EmergeLabError, RuntimeError):
    pass
