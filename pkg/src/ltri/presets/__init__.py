"""Shipped per-layer threshold presets."""
