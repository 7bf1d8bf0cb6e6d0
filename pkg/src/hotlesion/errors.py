"""Exception hierarchy shared across the package."""


class HotError(Exception):
    """Base class for all package-specific errors."""


# taxonomy / manifest parsing
class MalformedDocument(HotError):
    pass


class DanglingParent(MalformedDocument):
    pass


class DuplicateName(MalformedDocument):
    pass


class EmptyCounts(HotError):
    pass


class CountBelowTailMin(HotError):
    pass


# synthetic generator
class InvalidSpec(HotError):
    pass


class UnknownKind(HotError):
    pass


class IoFailure(HotError):
    pass


# model
class InvalidConfig(HotError):
    pass


class ShapeMismatch(HotError):
    pass


class DimMismatch(HotError):
    pass


class ModalityMismatch(HotError):
    pass


class MissingBank(HotError):
    pass


class BadLabel(HotError):
    pass


class VariantMismatch(HotError):
    pass


# training
class EmptyTrainSet(HotError):
    pass


class DivergedLoss(HotError):
    pass


# calibration
class EmptyScores(HotError):
    pass


class UnreachableTarget(HotError):
    pass


class NoCorrectPredictions(HotError):
    pass


# inference / evaluation / sessions
class MissingThresholds(HotError):
    pass


class UnknownSession(HotError):
    pass


class DuplicateDermoscopic(HotError):
    pass


class EmptySet(HotError):
    pass


class InsufficientSamples(HotError):
    pass


class UnknownCategory(HotError):
    pass


class CheckpointError(HotError):
    pass
