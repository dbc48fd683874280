"""Deterministic digital twin of charge-capture detected magnetic resonance.

Simulates spin-dependent carrier generation from single NV centres,
long-lived interface trapping at diamond-metal electrode edges, optically
stimulated discharge into an electrode photocurrent, and the analysis
chain recovering spin spectra, Rabi oscillations, coherence times and
charge maps from the synthesized signals.
"""

__version__ = "0.1.0"

from .world import World, default_world  # noqa: F401
