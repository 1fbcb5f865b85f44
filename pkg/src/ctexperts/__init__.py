"""Source-aware multi-expert pipeline for multi-source volumetric CT classification."""

__version__ = "0.1.0"
