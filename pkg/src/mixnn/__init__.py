"""Desk-scale self-supervised learning with mixed nearest-neighbor targets.

A teacher/student encoder pair trained with a weighted squared-error loss
whose extra targets are support-set nearest neighbors, convex-mixed toward
the anchor embedding to blunt the effect of wrong-class neighbors. Includes
the mean-squared and cross-attention weighting baselines, label-aware
diagnostics, frozen-feature evaluation, and a reproducible experiment
harness with a CLI (`mixnn --help`).
"""

__version__ = "0.1.0"

from . import diagnostics, evaluation, model, objective, support, vecmath

__all__ = ["diagnostics", "evaluation", "model", "objective", "support", "vecmath", "__version__"]
