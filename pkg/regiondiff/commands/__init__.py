"""A module for each CLI command."""
