"""Architecture similarity via adversarial attack transferability."""
__version__ = "0.1.0"
