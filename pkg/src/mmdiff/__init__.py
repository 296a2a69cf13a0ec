"""Desk-scale bidirectional diffusion + toy LLM multimodal system, in plain numpy."""

__version__ = "0.1.0"
