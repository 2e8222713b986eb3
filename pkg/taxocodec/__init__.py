"""
taxocodec
Learned compression of intermediate deep features for multiple analytics tasks
"""

__version__ = "0.1.0"
