"""Fact-aware abstractive sentence summarization toolkit."""

__version__ = "0.1.0"
