"""Two-area AGC simulation, false data injection, tree-ensemble detection and LLM explanations."""

__version__ = "0.1.0"
