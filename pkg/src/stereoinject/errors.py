"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures to
documented process exit statuses without a lookup table of its own.
"""


class StereoInjectError(Exception):
    exit_code = 1


class ConfigError(StereoInjectError):
    exit_code = 2


class GeometryError(StereoInjectError):
    exit_code = 3


class NonPositiveDepth(GeometryError):
    """A point lies behind or on the camera plane."""


class DegenerateRays(GeometryError):
    """Two back-projected rays are (nearly) parallel."""


class DegeneratePlanes(GeometryError):
    """Two back-projection planes coincide or are parallel."""


class SceneError(StereoInjectError):
    exit_code = 4


class SceneOutOfFrame(SceneError):
    pass


class DetectionError(StereoInjectError):
    exit_code = 5


class EmptyAoI(DetectionError):
    pass


class NoConsensus(DetectionError):
    pass


class NoSilhouette(DetectionError):
    pass


class AmbiguousShaft(DetectionError):
    pass


class CalibrationError(StereoInjectError):
    exit_code = 6


class NotConverged(CalibrationError):
    pass


class DegenerateDataset(CalibrationError):
    pass


class AlignmentError(StereoInjectError):
    exit_code = 7


class UnreachablePose(AlignmentError):
    pass
