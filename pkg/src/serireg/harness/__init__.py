"""Phantoms, configuration, pipeline orchestration, reports and the CLI."""
