"""Online sequence-to-sequence transduction with hard emission decisions."""

__version__ = "0.1.0"
