"""Empowerment through causal learning on synthetic factored MDPs."""

__version__ = "0.1.0"
