# Copyright (c) proj-sglmm developers
# License: AGPL-3.0
"""
projsglmm

Projection-based spatial generalized linear mixed models fitted by Monte Carlo EM or Laplace EM.
"""

__version__ = "0.1.0"
