"""Approximate correctors, Green's functions and concentration checks for
random elliptic equations in nondivergence form."""

__version__ = "0.1.0"
