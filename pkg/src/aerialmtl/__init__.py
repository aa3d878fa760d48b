"""Joint aerial depth completion and object detection over a shared encoder."""

__version__ = "0.1.0"
