"""Patient-therapist force fields and synthetic-therapist prediction for coupled gait."""

__version__ = "0.1.0"
