"""Skew stickiness ratio toolkit."""
