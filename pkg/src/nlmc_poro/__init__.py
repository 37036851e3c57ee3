"""Embedded-fracture poroelasticity on a fine grid with NLMC coarse-grid upscaling."""

__version__ = "0.1.0"
