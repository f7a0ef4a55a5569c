"""Use chat LLMs as post hoc explainers of small classifiers and score them."""

__version__ = "0.1.0"
