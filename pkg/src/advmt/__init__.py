"""Adversarial attacks on sequence-to-sequence translation models and their evaluation."""

__version__ = "0.1.0"
