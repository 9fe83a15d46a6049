"""roarlab: desk-scale remove-and-retrain attribution benchmarking.

Trains a tiny CNN on synthetic images, scores feature attributions with
the ROAR (remove-and-retrain) and ROAD (remove-and-debias) protocols,
applies model/data-agnostic attribution post-processing, and verifies the
information-theoretic behavior of the protocols on exactly enumerable
discrete worlds.

Submodules are imported lazily by the CLI; library users import what they
need (`roarlab.pipeline`, `roarlab.infotheory`, ...).
"""

__version__ = "0.1.0"

__all__ = [
    "attribution",
    "autodiff",
    "cli",
    "datasets",
    "infotheory",
    "masking",
    "network",
    "pipeline",
    "postproc",
    "report",
    "seeding",
]
