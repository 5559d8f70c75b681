"""Error hierarchy shared by all modules.

Every error carries a stable ``code`` (the class name) that backends report
verbatim, e.g. in HTTP error bodies and CLI diagnostics.
"""


class PimipError(Exception):
    """Base class for all structured platform errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


# --- container / TIFF parsing ---

class BadMagic(PimipError):
    pass


class UnsupportedVersion(PimipError):
    pass


class TruncatedFile(PimipError):
    pass


class CyclicChain(PimipError):
    pass


class UnsupportedTagType(PimipError):
    pass


class InvalidDirectory(PimipError):
    """A directory violates the tiled-TIFF subset invariants."""


class UnsupportedCompression(PimipError):
    pass


class UnsupportedFormat(PimipError):
    """Input outside the supported container/pixel subset."""


# --- pyramid access ---

class TileOutOfRange(PimipError):
    pass


class LevelOutOfRange(PimipError):
    pass


class ZeroAreaRect(PimipError):
    pass


class MissingManifest(PimipError):
    pass


class ManifestMismatch(PimipError):
    pass


class IoFailure(PimipError):
    pass


# --- magnification stops ---

class UnknownStop(PimipError):
    pass


class StopExceedsBase(PimipError):
    pass


# --- annotation geometry / editing ---

class EmptyInput(PimipError):
    pass


class DegeneratePolyline(PimipError):
    pass


class DegenerateRect(PimipError):
    pass


class OutOfBounds(PimipError):
    pass


class EmptyIntersection(PimipError):
    pass


class NothingToUndo(PimipError):
    pass


# --- analysis ---

class DuplicateName(PimipError):
    pass


class UnknownAnalyzer(PimipError):
    pass


class UnknownClassifier(PimipError):
    pass


class BadParams(PimipError):
    pass


class SeedOutOfBounds(PimipError):
    pass


class MissingResult(PimipError):
    pass


class UnknownTask(PimipError):
    pass


# --- store ---

class DuplicateSlideId(PimipError):
    pass


class UnreadableSource(PimipError):
    pass


class UnknownSlide(PimipError):
    pass


class UnknownAnnotation(PimipError):
    pass


class VersionConflict(PimipError):
    pass


class MalformedDocument(PimipError):
    pass
