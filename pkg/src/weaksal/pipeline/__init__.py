"""Alternating training stages, dataset handling, evaluation and the CLI."""
