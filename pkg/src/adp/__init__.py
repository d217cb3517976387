"""Branched self-ensemble training with DyMAIN normalization, PMoC schedules and DCML alignment."""

__version__ = "0.1.0"
