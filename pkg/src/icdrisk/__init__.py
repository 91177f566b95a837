"""Holter-derived arrhythmic risk markers, dual mortality/shock risk scores,
competing-risk survival statistics and ICD trial cohort simulation."""

__version__ = "0.1.0"
