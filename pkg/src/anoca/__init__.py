"""Network-aware PV export curtailment with prosumer battery scheduling."""

__version__ = "0.1.0"
