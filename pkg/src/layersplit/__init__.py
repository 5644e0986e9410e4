"""Layer decomposition of composite images into background and RGBA foreground."""

__version__ = "0.1.0"
