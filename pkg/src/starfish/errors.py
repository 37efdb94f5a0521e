"""Exception types shared across the engine and protocol layers.

Grouped here so the CLI can map error families onto exit codes without
importing every module.
"""


class StarfishError(Exception):
    """Base class for all package errors."""


class ConfigError(StarfishError):
    """Invalid run configuration (bad value, unknown key, missing file)."""


class RangeError(StarfishError):
    """Value not representable under the fixed-point codec."""


class ShapeError(StarfishError):
    """Operand shapes incompatible with the requested operation."""


class ProtocolError(StarfishError):
    """Base class for failures raised while a two-party session runs."""


class TransportError(ProtocolError):
    """Channel failure: framing violation, peer loss, tag mismatch."""


class DealerExhausted(ProtocolError):
    """A capped dealer tape ran out of preprocessed material."""


class DivisionDomainError(ProtocolError):
    """sec_div divisor outside its admissible domain."""


class SingularRevealError(ProtocolError):
    """sec_mi revealed a masked product that cannot be inverted."""


class SingularCurvatureError(ProtocolError):
    """Revealed masked curvature product is zero; the L-BFGS pair is unusable."""


class DegenerateRoundError(ProtocolError):
    """Round selection saw a zero model update where one is required."""


class AssumptionError(StarfishError):
    """A theoretical precondition (mu > 2, eta_u = mu/L) does not hold."""


class UnknownFunctionality(StarfishError):
    """Cost prediction or audit asked about a functionality we do not meter."""
