"""Desk-scale masked-language-model pretraining with dynamic masking-rate schedules."""

__version__ = "0.1.0"
