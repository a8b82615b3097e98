"""Exception hierarchy shared by all swct modules.

The CLI maps these onto stable exit codes: usage problems exit 1,
``DataError`` exits 2, ``AlgorithmError`` exits 3.
"""


class SwctError(Exception):
    """Base class for all toolkit errors."""


class DataError(SwctError):
    """Invalid or inconsistent input data (files, geometry, parameters)."""


class AlgorithmError(SwctError):
    """An algorithm failed or refused to produce a result."""


class NrrdFormatError(DataError):
    """Malformed or unsupported NRRD file."""


class GeometryMismatchError(DataError):
    """Two grids that must share dims/spacing/origin do not."""


class SeedError(DataError):
    """A region-growing seed is outside the volume, HU range or restriction."""


class GrowthCapError(AlgorithmError):
    """Region growing exceeded its voxel cap (likely leak outside the target)."""


class TrackingError(AlgorithmError):
    """Rigid tracking could not evaluate its objective (template left the volume)."""


class MeshError(DataError):
    """Mesh violates a structural precondition (e.g. not watertight)."""


class CageError(DataError):
    """Cage lattice is malformed or a vertex lies outside it."""


class PredictorError(AlgorithmError):
    """An external predictor failed (nonzero exit, timeout, bad outputs)."""
