"""Exception hierarchy shared by the simulator modules."""


class HibersimError(Exception):
    """Base class for every error raised by the simulator."""


class AllocationError(HibersimError):
    """The page allocator could not obtain a block from its heap source."""


class DoubleFreeError(HibersimError):
    """A reference count was decremented below zero."""


class RefcountOverflowError(HibersimError):
    """A 16-bit page reference count would overflow."""


class AllocatorCorruption(HibersimError):
    """Allocator metadata is inconsistent (bitmaps, free list, counts)."""


class SegmentationFault(HibersimError):
    """Access to a virtual address outside every mapped region."""


class PermissionFault(HibersimError):
    """Write access to a read-only mapping."""


class AddressSpaceExhausted(HibersimError):
    """The per-space virtual address cursor ran past the address limit."""


class SwapCorruptionError(HibersimError):
    """Swap metadata does not match the on-disk state."""


class SwapIOError(HibersimError):
    """Writing a swap or REAP file failed; the operation was rolled back."""


class FormatError(HibersimError):
    """A REAP file could not be parsed."""


class RecordingError(HibersimError):
    """REAP recording was started in an invalid situation."""


class IllegalTransition(HibersimError):
    """A trigger is not allowed in the sandbox's current state."""


class ConfigError(HibersimError):
    """A scenario configuration failed validation."""


class AuditError(HibersimError):
    """An invariant walk found a violated invariant."""
