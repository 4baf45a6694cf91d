"""Desk-scale autonomous fine-tuning of planar quadruped locomotion skills."""

__version__ = "0.1.0"
