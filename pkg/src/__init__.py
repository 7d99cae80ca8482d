"""Certified reduced-basis models for damped wave equations on networks."""

__version__ = "0.1.0"
__author__ = "Matt"
__description__ = "Certified reduced-basis models for damped wave equations on pipe networks"
