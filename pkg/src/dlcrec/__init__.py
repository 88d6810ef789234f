"""Controllable-diversity recommendation toolkit: dataset construction, the
GP -> GF -> IP control cascade, grounding and evaluation."""

__version__ = "0.1.0"
