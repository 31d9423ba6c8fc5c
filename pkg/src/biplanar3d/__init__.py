"""Biplanar projection to 3D shape reconstruction."""
