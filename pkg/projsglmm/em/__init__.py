# -*- coding: utf-8 -*-

# Copyright (c) proj-sglmm developers
# License: AGPL-3.0
"""
EM drivers for the projected model.
"""

from .Laplace import fit_la_em
from .Mcmc import fit_mcmc_em

__all__ = ("fit_la_em", "fit_mcmc_em")
