"""Knowledge-query heart-sound abnormality diagnosis: reports to labels, audio to predictions."""

__version__ = "0.1.0"
