"""Skill localization by grafting: sparse regions of fine-tuned parameters on synthetic tasks."""

__version__ = "0.1.0"
