"""News comment generation with a span-reading network and an attentive decoder."""

__version__ = "0.1.0"
