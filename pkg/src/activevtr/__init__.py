"""Multi-camera visual teach and repeat in a stereo simulator."""

__version__ = "0.1.0"
