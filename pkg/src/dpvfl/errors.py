"""Semantic exception hierarchy shared across the package."""


class VflError(Exception):
    """Base class for all package errors."""


class ArgumentError(VflError, ValueError):
    """An argument violates a documented precondition."""


class StateError(VflError, RuntimeError):
    """An operation was called in an invalid order (e.g. backward before forward)."""


class ProtocolError(VflError, RuntimeError):
    """A round could not complete; message names the party and round."""


class DataFormatError(VflError, ValueError):
    """A dataset file or schema could not be parsed."""


class PartitionPlanError(VflError, ValueError):
    """A vertical partition plan does not cover the feature columns exactly once."""


class CheckpointError(VflError, ValueError):
    """A model checkpoint is missing, malformed, or fails its checksum."""


class ConfigError(VflError, ValueError):
    """An experiment config is invalid; maps to CLI exit code 2."""


class InsufficientRetainedError(VflError, RuntimeError):
    """Confidence filtering retained too few samples for the requested statistic."""
