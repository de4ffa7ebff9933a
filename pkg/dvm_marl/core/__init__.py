"""Numerical core: network substrate, domain types and errors."""
