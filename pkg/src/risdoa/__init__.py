"""Off-grid 2D DoA estimation through a reconfigurable intelligent surface."""

__version__ = "0.1.0"
