"""Automation for Monte Carlo radiation-transport studies.

Generates input decks, runs cycles in parallel, merges binary scoring output,
tracks statistical convergence and turns detector spectra into
microdosimetric quantities.
"""

__version__ = "0.1.0"

from .errors import MCForgeError
from .stats import average_energy, average_uncertainty, required_nps

__all__ = ["MCForgeError", "average_energy", "average_uncertainty", "required_nps", "__version__"]
