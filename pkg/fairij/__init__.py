"""Fairness influence functions and post-hoc Fair-IJ mitigation for tabular classifiers."""

__version__ = "0.1.0"
