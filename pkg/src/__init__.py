"""Left-truncation aware survival analysis toolkit"""

__version__ = "1.0.0"
