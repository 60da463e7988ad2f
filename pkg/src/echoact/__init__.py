"""Active-acoustic activity recognition: chirps, simulated echoes, acoustic flow, and a small CNN."""

__version__ = "0.1.0"
