"""Static architecture analysis and detection evaluation for YOLO-style models."""

__version__ = "0.1.0"
