"""Inverse factors of sparse SPD matrices on an instrumented task runtime.

Modules:

* :mod:`qtinv.blockmat`: block-sparse leaf matrices and leaf kernels
* :mod:`qtinv.taskrt`: chunk registry and work-stealing task executor
* :mod:`qtinv.quadtree`: quad-tree matrices and their algebra
* :mod:`qtinv.factorize`: RINCH, IRSI and LIF inverse factorizations
* :mod:`qtinv.cpmodel`: critical-path-length models
* :mod:`qtinv.genmat`: synthetic overlap matrices and Matrix Market I/O
* :mod:`qtinv.cli`: benchmark driver
"""

from .blockmat import DimensionMismatch, LeafMatrix, NotPositiveDefinite
from .factorize import (
    Divergence,
    FactorizationReport,
    RefinementParams,
    irsi,
    kmax_bound,
    lif,
    rinch,
)
from .genmat import GenSpec, generate, load_mm, save_mm
from .quadtree import HMatrix
from .taskrt import RunStats, Runtime

__version__ = "0.1.0"

__all__ = [
    "DimensionMismatch",
    "Divergence",
    "FactorizationReport",
    "GenSpec",
    "HMatrix",
    "LeafMatrix",
    "NotPositiveDefinite",
    "RefinementParams",
    "RunStats",
    "Runtime",
    "generate",
    "irsi",
    "kmax_bound",
    "lif",
    "load_mm",
    "rinch",
    "save_mm",
]
