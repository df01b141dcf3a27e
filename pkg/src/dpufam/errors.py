"""Exception hierarchy shared by all agents."""


class FamError(Exception):
    """Base class for runtime errors."""


class AllocationError(FamError):
    pass


class ProtectionFault(FamError):
    """Out-of-bounds or unknown-key access to a registered region."""


class MessageTooLarge(FamError):
    pass


class DecodeError(FamError):
    pass


class EncodeError(FamError):
    pass


class CoherenceError(FamError):
    """Violation of the single-writer rule."""


class UnknownRegion(FamError):
    pass


class RemoteError(FamError):
    """Error reported by a peer agent through an error response."""


class ConfigError(FamError):
    pass
