"""Two-server PSI with weighted cardinality over distributed point functions."""

__version__ = "0.1.0"
