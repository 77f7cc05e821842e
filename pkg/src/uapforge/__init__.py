"""uapforge: a desk-scale laboratory for universal adversarial perturbations.

Trains small image classifiers, trains a generator that maps noise to a
single input-agnostic perturbation defeating them, and measures the standard
protocols around that attack: baseline comparisons, transfer across models,
perturbation diversity, targeted variants, data-budget sweeps, and an
adversarial-training defense game.
"""

__version__ = "0.1.0"
