"""Minimal-variance deadline scheduling workbench."""
