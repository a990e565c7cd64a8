"""Edge-deployable detection of falsified smart-meter readings under evasion attacks."""

__version__ = "0.1.0"
