# recap/agents/__init__.py
"""Fitting, relighting, ablation and validation agents"""
