"""Generate-then-reason pipeline for knowledge-based VQA."""
__version__ = "0.1.0"
