"""Exception hierarchy shared by every module.

Each error carries an ``exit_code`` used by the command-line front end.
"""


class RsvoError(Exception):
    exit_code = 3


class NonPositiveDepth(RsvoError):
    pass


class NoConvergence(RsvoError):
    pass


class DegenerateTranslation(RsvoError):
    pass


class NumericalFailure(RsvoError):
    pass


class SingularIntrinsics(RsvoError):
    exit_code = 2


class DegenerateDenominator(RsvoError):
    pass


class DegenerateCloud(RsvoError):
    pass


class RankDeficientDesign(RsvoError):
    pass


class CheiralityAmbiguous(RsvoError):
    pass


class NonFiniteJacobian(RsvoError):
    pass


class InitializationFailed(RsvoError):
    pass


class AllHypothesesDegenerate(RsvoError):
    pass


class TooFewWaypoints(RsvoError):
    exit_code = 2


class InsufficientVisibility(RsvoError):
    pass


class ConfigParseError(RsvoError):
    exit_code = 2


class SchemaError(RsvoError):
    exit_code = 2


class TooFewPoints(RsvoError):
    exit_code = 2


class IoError(RsvoError):
    exit_code = 4
