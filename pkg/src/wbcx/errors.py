"""Exception hierarchy shared across the package."""


class WbcxError(Exception):
    """Base class for all package-specific errors."""


class EmptyCytoplasm(WbcxError):
    """Cytoplasm raster has no set pixels; the N:C ratio is undefined."""


class InvalidBox(WbcxError):
    """Corner-form box with non-positive width or height."""


class DegenerateAugment(WbcxError):
    """Augmentation pushed the cell out of frame after all retries."""


class SchemaMismatch(WbcxError):
    """On-disk dataset version or record layout is not recognized."""


class MissingFile(WbcxError):
    """A manifest entry points at a file that does not exist."""


class CorruptMask(WbcxError):
    """Mask dimensions disagree with the image, or a stored derived
    field disagrees with recomputation."""


class ClassTooSmall(WbcxError):
    """A class has too few samples for the requested split or fold plan."""


class NonFiniteCost(WbcxError):
    """Cost matrix contains NaN or infinity."""


class TooManyObjects(WbcxError):
    """More ground-truth objects than prediction slots."""


class DimensionMismatch(WbcxError):
    """Rasters passed to a loss do not share dimensions."""


class DimensionError(WbcxError):
    """Batch images do not share dimensions or are malformed."""


class InvalidConfig(WbcxError):
    """Model configuration violates its invariants."""


class NoDetection(WbcxError):
    """No slot passed the confidence threshold in thresholded decoding."""


class Diverged(WbcxError):
    """Training loss became non-finite."""


class EmptyInput(WbcxError):
    """A metric or evaluation was called with no samples."""


class SingleClassLabels(WbcxError):
    """ROC/AUC needs both positive and negative labels present."""


class VocabularyMismatch(WbcxError):
    """Association tables being compared use different attribute vocabularies."""
