"""emergelab: emergent-communication games over SQOOP-style letter scenes and
tools to measure how compositional the resulting language is."""

__version__ = "0.1.0"
