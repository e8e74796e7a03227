"""Subject word embedding altering for knowledge editing, on a toy transformer."""

__version__ = "0.1.0"
