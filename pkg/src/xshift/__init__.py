"""Cross-domain generalization audit toolkit for multi-label classifiers."""

__version__ = "0.1.0"
