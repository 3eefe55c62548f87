"""keytraj: coarse-to-fine trajectory forecasting.

A small, self-contained toolkit that decodes multimodal future trajectories
by first predicting a sparse outline of key steps and then recursively
filling midpoints, with a learned confidence head that selects the key-step
granularity per mode at inference time.
"""

__version__ = "0.1.0"
