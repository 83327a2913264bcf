"""Fused capsule networks for alcohol detection from periocular NIR images.

Includes a from-scratch autodiff engine, capsule routing, baselines, pupil/iris
ratio analysis, Grad-CAM saliency and a synthetic dataset generator.
"""

__version__ = "0.1.0"
