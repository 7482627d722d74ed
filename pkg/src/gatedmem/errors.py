"""Exception types shared across the package."""


class ProtocolViolation(RuntimeError):
    """A fit-only operation was invoked outside the fit stage, or stage order was broken."""


class FreezeMismatch(ProtocolViolation):
    """Test-stage inputs hash differently from the freeze manifest."""


class SignalUndefined(ValueError):
    """A statistic is undefined for the given input (e.g. single-class AUC)."""
