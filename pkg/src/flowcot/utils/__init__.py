"""Shared helpers: errors, log-domain arithmetic, seeding and file I/O."""
