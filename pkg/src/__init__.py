"""
sqlsentinel: natural-language questions answered with guarded, read-only SQL.
"""

__version__ = "1.0.0"
