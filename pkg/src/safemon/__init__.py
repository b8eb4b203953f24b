"""Runtime safety monitoring for ML object detectors.

Monitors cover three complementary failure sources: inputs outside the
operating domain (odd), inputs unlike the training distribution (ood), and
model outputs outside the learned feature envelope (oms). The pipeline module
composes them serially in that order; the metrics module scores the joint
system on safety gain, residual hazard and availability cost.
"""

__version__ = "0.1.0"
