"""Exception hierarchy shared by every module."""


class RiaError(Exception):
    """Base class; ``tag`` names the module that raised."""

    tag = "ria"

    def as_record(self) -> dict:
        return {"error": type(self).__name__, "module": self.tag, "message": str(self)}


class DimensionError(RiaError, ValueError):
    tag = "tensor-core"


class DomainError(RiaError, ValueError):
    tag = "tensor-core"


class ContractError(RiaError, ValueError):
    def __init__(self, message: str, tag: str = "ria"):
        super().__init__(message)
        self.tag = tag


class ConfigError(RiaError, ValueError):
    tag = "config"


class EmbeddingLookupError(RiaError, IndexError):
    tag = "layers"

    def __init__(self, field: str, index: int, vocab_size: int):
        super().__init__(f"field {field!r}: index {index} outside [0, {vocab_size})")
        self.field = field
        self.index = index


class RecordError(RiaError, ValueError):
    """A record violates an ImpressionRecord invariant."""

    tag = "data"

    def __init__(self, record_id: str, rule: str, line: int | None = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"record {record_id!r}{where} violates rule {rule!r}")
        self.record_id = record_id
        self.rule = rule
        self.line = line


class ParseError(RiaError, ValueError):
    tag = "data"

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class UndefinedMetricError(RiaError, ValueError):
    tag = "metrics"


class CacheMissError(RiaError, KeyError):
    tag = "ec-pipeline"

    def __init__(self, key):
        super().__init__(key)
        self.key = key

    def __str__(self) -> str:
        return f"cache miss for key {self.key!r}"


class TrainingError(RiaError, RuntimeError):
    tag = "ria-train"
