"""Joint multi-object render-and-compare pose refinement on procedural scenes."""

__version__ = "0.1.0"
