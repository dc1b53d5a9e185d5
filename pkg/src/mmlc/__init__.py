"""Multi-task meta label correction for price-trend classification.

Price series are encoded as trend-signed images (SGAF / SRP) and relative
ratio rasters (RRP); a shared label-correction network is trained jointly
with per-horizon classifiers by one-step unrolled bi-level optimisation.
"""

__version__ = "0.1.0"
