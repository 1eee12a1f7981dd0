"""Quantum harmonic oscillator with random frequency and force.

Average transition probabilities and thermodynamic quantities computed by
three cross-checking routes: closed-form trajectory formulas, Monte Carlo
SDE ensembles and Fokker-Planck / Feynman-Kac PDE solves.
"""
from .scenario import ScenarioConfig, TimeProfile, evaluate_profile, load_config, validate

__version__ = "0.1.0"

__all__ = ["ScenarioConfig", "TimeProfile", "evaluate_profile", "load_config", "validate",
           "__version__"]
