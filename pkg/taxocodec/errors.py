"""
errors.py
Reason-coded exceptions shared by the library and the command line.

Every exception carries a stable ``code`` so the CLI can turn any failure
into a single machine-parsable line.
"""

from typing import Optional


class TaxoCodecError(Exception):
    code = "INTERNAL"

    def __init__(self, message: str, code: Optional[str] = None):
        super().__init__(message)
        if code is not None:
            self.code = code

    @property
    def detail(self) -> str:
        return str(self.args[0]) if self.args else ""


class ShapeMismatchError(TaxoCodecError, ValueError):
    code = "SHAPE_MISMATCH"


class NonFiniteError(TaxoCodecError, ValueError):
    code = "NON_FINITE"

    def __init__(self, message: str, layer_index: Optional[int] = None):
        super().__init__(message)
        self.layer_index = layer_index


class DecodeError(TaxoCodecError):
    code = "DECODE_FAILED"


class CodebookMismatchError(DecodeError):
    code = "HASH_MISMATCH"


class UnsupportedVersionError(TaxoCodecError):
    code = "VERSION_UNSUPPORTED"


class FrozenModelError(TaxoCodecError):
    code = "MODEL_FROZEN"


class UnknownTaskError(TaxoCodecError, KeyError):
    code = "UNKNOWN_TASK"

    def __str__(self) -> str:
        return self.detail


class TrainingDivergedError(TaxoCodecError):
    code = "TRAINING_DIVERGED"

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class QualificationError(TaxoCodecError):
    code = "QUALIFICATION_FAILED"


class GradientCheckError(TaxoCodecError):
    code = "GRADCHECK_FAILED"

    def __init__(self, message: str, parameter_index: int):
        super().__init__(message)
        self.parameter_index = parameter_index


class ConfigError(TaxoCodecError, ValueError):
    code = "CONFIG_INVALID"


class ArtifactNotFoundError(TaxoCodecError):
    code = "MODEL_NOT_FOUND"


class DataNotFoundError(ArtifactNotFoundError):
    code = "DATA_NOT_FOUND"
