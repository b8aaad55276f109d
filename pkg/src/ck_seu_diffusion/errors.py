"""Exceptions raised by ck_seu_diffusion"""


class CkSeuError(Exception):
    """Base of every error raised by this package"""


class CodecError(CkSeuError, ValueError):
    """Invalid bit position or an operation undefined for the given binary16 pattern"""


# checkpoint container
class CheckpointError(CkSeuError):
    pass

class MalformedHeader(CheckpointError):
    """Header length, JSON text or entry fields are invalid"""

class RangeError(CheckpointError):
    """Data offsets overlap, fall outside the data region or disagree with the shape"""

class DtypeError(CheckpointError):
    """A binary16 tensor was required"""

class UnknownTensor(CheckpointError):
    pass

class ElementIndexError(CheckpointError, IndexError):
    pass


# addressing
class InvalidSelector(CkSeuError, ValueError):
    """Layer and matrix role do not belong together"""

class UnknownTarget(CkSeuError):
    """Selector outside the model topology"""


class RecordMismatch(CkSeuError):
    """The stored pattern does not match the injection record"""

class InjectionError(CkSeuError):
    """No element can be selected in the target tensor"""


class ShapeError(CkSeuError, ValueError):
    pass

class TopologyMismatch(CkSeuError):
    """The checkpoint does not cover the model topology"""


class ZeroNorm(CkSeuError, ValueError):
    pass


class IsolationError(CkSeuError):
    """The base checkpoint changed during a campaign"""


# configuration
class ConfigError(CkSeuError):
    pass

class ParseError(ConfigError):
    pass

class ValidationError(ConfigError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


# reports
class ReportError(CkSeuError):
    pass

class UnknownGrouping(ReportError):
    pass

class MissingCache(ReportError):
    pass
