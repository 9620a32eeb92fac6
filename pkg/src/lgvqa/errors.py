"""Exception hierarchy shared across the package.

Everything raised on purpose derives from :class:`LgvqaError` so callers can
catch one type at the CLI boundary.  Config-shaped problems (bad flags, bad
mode/backend pairings) derive from :class:`ConfigError`; problems with input
files derive from :class:`DataError`.
"""


class LgvqaError(Exception):
    """Base class for all package errors."""


class ConfigError(LgvqaError):
    """Invalid configuration or invalid combination of options."""


class DataError(LgvqaError):
    """Invalid or unreadable input data."""


# --- core ---------------------------------------------------------------

class ChoiceCountError(DataError):
    """Number of answer choices outside the supported 2..5 range."""


class GoldIndexError(DataError):
    """Gold answer index not a valid index into the choices."""


class DuplicateChoiceError(DataError):
    """Two choices equal after whitespace normalization."""


class SchemaError(DataError):
    """A record does not match the expected schema; message names the field."""


class GuidanceConflictError(DataError):
    """Conflicting guidance text for the same (instance, kind) key."""


# --- backends -----------------------------------------------------------

class EmptyTextError(LgvqaError):
    """Text produced no tokens; nothing to encode."""


class ImageResolveError(LgvqaError):
    """Image reference could not be resolved to features."""


class DimMismatchError(LgvqaError):
    """Vector dimensions do not line up."""


class ShrinkError(LgvqaError):
    """Positional table extension asked to shrink or keep the same length."""


# --- scoring ------------------------------------------------------------

class EmptyFieldError(LgvqaError):
    """Prompt assembly received an empty question or choice."""


class MissingGuidanceError(LgvqaError):
    """A guided scoring mode was requested without a guidance bundle."""


class ModeBackendMismatchError(ConfigError):
    """The scoring mode is not supported by the given backend."""


class AllMaskedError(LgvqaError):
    """Every choice slot is masked; no prediction possible."""


# --- guidance -----------------------------------------------------------

class EmptyDetectionError(LgvqaError):
    """Detection set is empty; nothing to serialize."""


class NoGuidanceAvailableError(LgvqaError):
    """None of the requested guidance kinds is present in the bundle."""


class CacheIOError(LgvqaError):
    """Guidance cache file could not be read or written."""


class GenerationInputError(LgvqaError):
    """Generator received unusable input (e.g. an empty question)."""


# --- training -----------------------------------------------------------

class MaskedGoldError(LgvqaError):
    """The gold choice is masked out; loss undefined."""


class EmptyDatasetError(DataError):
    """Training or evaluation received no instances."""


# --- evalreport ---------------------------------------------------------

class EmptyPredictionsError(LgvqaError):
    """No predictions to aggregate."""


class IdSetMismatchError(LgvqaError):
    """Prediction sets cover different instance ids."""


class SliceMismatchError(LgvqaError):
    """Reports being averaged do not share the same slices."""
