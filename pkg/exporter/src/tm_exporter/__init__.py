"""Thin PyTorch shim that captures intermediate activations for every
(sample, transformation) pair into STDUMP v1 files and exports sequential
model weights to NNW v1, for consumption by the measurement engine.

The shim speaks only the binary wire formats; it does not depend on the
measurement package.
"""

__version__ = "0.1.0"

from .export import ExportError, HookPlan, export_activations, export_weights

__all__ = ["ExportError", "HookPlan", "export_activations", "export_weights"]
