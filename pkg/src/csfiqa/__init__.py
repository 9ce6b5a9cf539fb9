"""CSFIQA - desk-scale multi-scale blind image quality assessment."""

__version__ = "0.1.0"
