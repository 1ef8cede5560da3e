"""Decentralized federated LoRA simulator with alternating and joint mixing."""

__version__ = "0.1.0"
