# handlers/__init__.py
"""One handler module per CLI command; each exposes handle_<command>(cfg, args)."""
