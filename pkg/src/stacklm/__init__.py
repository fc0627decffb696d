"""Stacked-LSTM language modeling with gradual layer growth and layer-wise
gradient clipping, plus an exact discrete information-theory lab."""

__version__ = "0.1.0"
