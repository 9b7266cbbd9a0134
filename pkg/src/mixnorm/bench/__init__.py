"""Experiment runner, diagnostics and plotting."""
