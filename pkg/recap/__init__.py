# recap/__init__.py
"""Cross-environment Gaussian relighting"""
__version__ = "1.0.0"
