"""Exception hierarchy shared by the protocol modules."""


class VBFTError(Exception):
    """Base class for every error raised by this package."""


class EncodingError(VBFTError):
    pass


class CryptoError(VBFTError):
    pass


class DuplicateSigner(CryptoError):
    pass


class BadComponentSignature(CryptoError):
    pass


class MalformedAggQC(CryptoError):
    pass


class CertificateError(VBFTError):
    pass


class TooFew(CertificateError, CryptoError):
    pass


class DuplicateVoter(CertificateError):
    pass


class DuplicateSender(CertificateError):
    pass


class MixedVotes(CertificateError):
    pass


class MixedView(CertificateError):
    pass


class Mixed(CertificateError):
    pass


class QCInvalid(VBFTError):
    pass


class CannotRevoke(VBFTError):
    pass


class StopNeverReached(VBFTError):
    """Raised when a run hits its event cap before the stop condition.

    The partial trace is attached so callers can still persist it.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


class MalformedTrace(VBFTError):
    pass


class ParseError(VBFTError):
    pass


class InvalidScenario(VBFTError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
