"""cortexenc: word-representation models and cross-validated encoding of brain signals."""

__version__ = "0.1.0"
