"""Community detection among signals without observed edges."""
__version__ = "0.1.0"
