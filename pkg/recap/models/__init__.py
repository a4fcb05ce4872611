# recap/models/__init__.py
"""Data models and schemas"""
