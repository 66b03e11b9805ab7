"""surgVAE: disentangled multi-cohort VAE for perioperative outcome prediction, in numpy."""
from __future__ import annotations

__version__ = "0.1.0"
