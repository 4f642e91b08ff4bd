"""Exception hierarchy shared across the package."""


class PhenotagError(Exception):
    """Base class for all errors raised by this package."""


class OboParseError(PhenotagError):
    """Malformed OBO input (missing mandatory keys, duplicate ids)."""


class OntologyError(PhenotagError):
    """Structural ontology problem (dangling reference, cycle, bad root)."""


class CorpusError(PhenotagError):
    """Corpus construction problem (bad split, malformed record)."""


class ConfigError(PhenotagError):
    """Invalid configuration value or file."""


class ModelInputError(PhenotagError):
    """Tensor input violates a model contract (shape, id range)."""


class CheckpointError(PhenotagError):
    """Unreadable or incompatible checkpoint."""


class TrainingDivergedError(PhenotagError):
    """Loss became NaN/Inf during optimization."""


class CalibrationError(PhenotagError):
    """Threshold calibration received an unusable input."""


class MappingError(PhenotagError):
    """Malformed mapping table input."""
