"""Dilated ensemble cascade networks for undersampled MRI reconstruction."""

__version__ = "0.1.0"
