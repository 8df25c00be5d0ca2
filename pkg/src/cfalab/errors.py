"""Exception types shared across the package."""


class CfaLabError(Exception):
    """Base class for every error raised by cfalab."""


class DimensionError(CfaLabError, ValueError):
    pass


class DomainError(CfaLabError, ValueError):
    pass


class ContractError(CfaLabError, ValueError):
    pass


class NonFiniteLossError(ContractError):
    pass


class OracleFailure(CfaLabError, RuntimeError):
    """Finite-difference probe produced a non-finite objective."""


class ParameterError(CfaLabError, ValueError):
    pass


class DegenerateInputError(CfaLabError, ValueError):
    pass


class EmptyInputError(CfaLabError, ValueError):
    pass


class VocabularyError(CfaLabError, KeyError):
    pass


class InfeasibleConfigError(CfaLabError, ValueError):
    pass


class DatasetParseError(CfaLabError, ValueError):
    def __init__(self, line_no: int, msg: str):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


class ConfigError(CfaLabError, ValueError):
    pass


class CheckpointError(CfaLabError, ValueError):
    pass


class DivergedRunError(CfaLabError, RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
