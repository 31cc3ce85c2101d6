__version__ = "2025.06.30"
