"""torusfill: fill-in experiments for flat tori (radial flow, mass aspect, band, HM benchmark)."""

__version__ = "0.1.0"
