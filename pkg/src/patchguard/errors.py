"""Exception hierarchy shared by all patchguard modules.

Every domain failure raises a subclass of :class:`PatchguardError`; the CLI
maps these to exit code 1 and argparse usage problems to exit code 2.
"""


class PatchguardError(Exception):
    """Base class for all domain errors raised by this package."""


class UnsupportedImageError(PatchguardError):
    """Image file exists but has a bit depth or layout we do not read."""


class DegenerateImageError(PatchguardError):
    """Segmentation cannot proceed, e.g. a constant image has no threshold."""


class EmptyMaskError(PatchguardError):
    """A segmentation produced no foreground pixels."""


class MalformedResponseError(PatchguardError):
    """External segmenter answered with something other than the contract."""


class SegmenterTransportError(PatchguardError):
    """External segmenter could not be reached or returned an HTTP error."""


class DimensionMismatchError(PatchguardError):
    """Two arrays that must share a shape do not."""


class ManifestError(PatchguardError):
    """Dataset manifest violates its invariants or cannot be parsed."""


class UntrainedDetectorError(PatchguardError):
    """score() was called on a detector handle that was never trained."""


class SingleClassError(PatchguardError):
    """AUROC is undefined because only one label class is present."""


class LoraStateError(PatchguardError):
    """Adapter operation invalid in the current state (e.g. double merge)."""


class GenerationError(PatchguardError):
    """Synthetic scene generation could not satisfy its invariants."""
