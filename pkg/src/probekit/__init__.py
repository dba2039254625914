"""Desk-scale detector-guided probing of a diffusion generator.

The core is functional (``tensor``, ``diffusion``, ``lora``, ``probe``,
``detector``, ``augment``, ``metrics``); ``estimators`` wraps it in a
scikit-learn style API and ``pipeline`` / ``cli`` run the staged experiment.
"""
from probekit.pipeline import __version__

__all__ = ["__version__"]
