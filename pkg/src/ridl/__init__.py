"""Radiomics-informed deep learning toolkit: texture features, local maps, LASSO and a toy fusion network."""

__version__ = "0.1.0"
