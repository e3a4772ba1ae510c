"""Exception hierarchy.  Each class carries the stable error code used in
diagnostics and by the CLI."""


class TaforgeError(Exception):
    code = "ERROR"

    def __str__(self):
        msg = super().__str__()
        return f"{self.code}: {msg}" if msg else self.code


class MalformedImage(TaforgeError):
    code = "MALFORMED_IMAGE"


class WindowExhausted(TaforgeError):
    code = "WINDOW_EXHAUSTED"


class UnsupportedClass(TaforgeError):
    code = "UNSUPPORTED_CLASS"


class UnresolvedSymbol(TaforgeError):
    code = "UNRESOLVED_SYMBOL"


class ResolverMiss(TaforgeError):
    code = "RESOLVER_MISS"


class EntryNotFound(TaforgeError):
    code = "ENTRY_NOT_FOUND"


class RangeExceeded(TaforgeError):
    code = "RANGE_EXCEEDED"


class RegionFull(TaforgeError):
    code = "REGION_FULL"


class UnknownTrampoline(TaforgeError):
    code = "UNKNOWN_TRAMPOLINE"


class SnapshotMismatch(TaforgeError):
    code = "SNAPSHOT_MISMATCH"


class CycleDetected(TaforgeError):
    code = "CYCLE_DETECTED"


class ForeignTrace(TaforgeError):
    code = "FOREIGN_TRACE"


class KindMismatch(TaforgeError):
    code = "KIND_MISMATCH"


class SpecInvalid(TaforgeError):
    code = "SPEC_INVALID"


class ConfigError(TaforgeError):
    code = "CONFIG_ERROR"
